//! Records and their four text encodings (JSON, XML, YAML, Python literal),
//! each in a dict shape and a tuple-set shape.
//!
//! Parsers are strict and never return a partial record: any malformation is
//! reported as a [`ParseFailure`] with a [`FailureKind`].

mod json;
mod pyliteral;
mod xml;
mod yaml;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    Str(String),
    /// Decimal number kept verbatim (JSON number grammar, finite).
    Num(String),
}

impl Value {
    pub fn str(s: impl Into<String>) -> Self {
        Value::Str(s.into())
    }

    pub fn num(s: impl Into<String>) -> Result<Self> {
        let s = s.into();
        if !is_number(&s) {
            return Err(Error::Invalid(format!("`{s}` is not a finite decimal number")));
        }
        Ok(Value::Num(s))
    }

    pub fn as_str(&self) -> &str {
        match self {
            Value::Str(s) | Value::Num(s) => s,
        }
    }

    pub fn is_num(&self) -> bool {
        matches!(self, Value::Num(_))
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `-?(0|[1-9][0-9]*)(\.[0-9]+)?([eE][+-]?[0-9]+)?` and finite as f64.
pub fn is_number(s: &str) -> bool {
    let b = s.as_bytes();
    let mut i = 0;
    let digits = |i: &mut usize| {
        let start = *i;
        while *i < b.len() && b[*i].is_ascii_digit() {
            *i += 1;
        }
        *i - start
    };
    if i < b.len() && b[i] == b'-' {
        i += 1;
    }
    let int_start = i;
    let n = digits(&mut i);
    if n == 0 || (n > 1 && b[int_start] == b'0') {
        return false;
    }
    if i < b.len() && b[i] == b'.' {
        i += 1;
        if digits(&mut i) == 0 {
            return false;
        }
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        if digits(&mut i) == 0 {
            return false;
        }
    }
    i == b.len() && s.parse::<f64>().is_ok_and(f64::is_finite)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    #[serde(rename = "dict")]
    Dict,
    #[serde(rename = "tuples")]
    TupleSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Xml,
    Yaml,
    PyLiteral,
}

impl Format {
    pub const ALL: [Format; 4] = [Format::Json, Format::Xml, Format::Yaml, Format::PyLiteral];

    pub fn name(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Xml => "xml",
            Format::Yaml => "yaml",
            Format::PyLiteral => "pyliteral",
        }
    }

    /// Symbols worth reserving in a vocabulary used to generate this format.
    pub fn structural_symbols(self) -> &'static [&'static str] {
        match self {
            Format::PyLiteral => &["{", "}", "(", ")", "'", ":", ","],
            Format::Json => &["{", "}", "[", "]", "\"", ":", ","],
            Format::Xml => &[
                "<record>",
                "</record>",
                "<field name=\"",
                "\">",
                "\" type=\"num\">",
                "</field>",
            ],
            Format::Yaml => &["{}", "- [", "]", "\"", ": ", ", "],
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Format::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown format `{s}` (json|xml|yaml|pyliteral)")))
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Dict => "dict",
            Shape::TupleSet => "tuples",
        }
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dict" => Ok(Shape::Dict),
            "tuples" => Ok(Shape::TupleSet),
            _ => Err(Error::Invalid(format!("unknown shape `{s}` (dict|tuples)"))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered (key, value) pairs. Dict records have unique keys; tuple-set
/// records have unique pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pairs: Vec<(String, Value)>,
    shape: Shape,
}

impl Record {
    pub fn new(shape: Shape, pairs: Vec<(String, Value)>) -> Result<Self> {
        for (i, (k, v)) in pairs.iter().enumerate() {
            if k.is_empty() {
                return Err(Error::Invalid("record keys must be nonempty".into()));
            }
            if let Value::Num(n) = v {
                if !is_number(n) {
                    return Err(Error::Invalid(format!("`{n}` is not a finite decimal number")));
                }
            }
            let dup = match shape {
                Shape::Dict => pairs[..i].iter().any(|(k2, _)| k2 == k),
                Shape::TupleSet => pairs[..i].iter().any(|(k2, v2)| k2 == k && v2 == v),
            };
            if dup {
                return Err(Error::Invalid(format!(
                    "duplicate {} `{k}` in {shape} record",
                    match shape {
                        Shape::Dict => "key",
                        Shape::TupleSet => "pair",
                    }
                )));
            }
        }
        Ok(Record { pairs, shape })
    }

    /// Convenience constructor for all-string records.
    pub fn strings<K: Into<String>, V: Into<String>>(
        shape: Shape,
        pairs: impl IntoIterator<Item = (K, V)>,
    ) -> Result<Self> {
        Record::new(
            shape,
            pairs
                .into_iter()
                .map(|(k, v)| (k.into(), Value::Str(v.into())))
                .collect(),
        )
    }

    pub fn empty(shape: Shape) -> Self {
        Record {
            pairs: Vec::new(),
            shape,
        }
    }

    pub fn pairs(&self) -> &[(String, Value)] {
        &self.pairs
    }

    pub fn into_pairs(self) -> Vec<(String, Value)> {
        self.pairs
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn keys(&self) -> Vec<&str> {
        self.pairs.iter().map(|(k, _)| k.as_str()).collect()
    }

    pub fn with_shape(self, shape: Shape) -> Result<Self> {
        Record::new(shape, self.pairs)
    }

    /// Rewrite every value's text. Numbers that stop being numbers are an error.
    pub fn map_values(&self, f: impl Fn(&str) -> String) -> Result<Self> {
        let pairs = self
            .pairs
            .iter()
            .map(|(k, v)| {
                let v = match v {
                    Value::Str(s) => Value::Str(f(s)),
                    Value::Num(s) => Value::num(f(s))?,
                };
                Ok((k.clone(), v))
            })
            .collect::<Result<_>>()?;
        Record::new(self.shape, pairs)
    }

    /// Order-insensitive equality.
    pub fn canonical_eq(&self, other: &Record) -> bool {
        canonicalize(self).pairs == canonicalize(other).pairs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FailureKind {
    TokenizerArtifact,
    GrammarViolation,
    DuplicateKey,
    TypeError,
}

impl FailureKind {
    pub fn name(self) -> &'static str {
        match self {
            FailureKind::TokenizerArtifact => "tokenizer-artifact",
            FailureKind::GrammarViolation => "grammar-violation",
            FailureKind::DuplicateKey => "duplicate-key",
            FailureKind::TypeError => "type-error",
        }
    }
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseFailure {
    pub kind: FailureKind,
    pub message: String,
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

pub type ParseOutcome = std::result::Result<Record, ParseFailure>;

pub(crate) fn fail<T>(kind: FailureKind, msg: impl Into<String>) -> std::result::Result<T, ParseFailure> {
    Err(ParseFailure {
        kind,
        message: msg.into(),
    })
}

pub fn serialize(r: &Record, format: Format) -> Result<String> {
    for (_, v) in &r.pairs {
        if let Value::Num(n) = v {
            if !is_number(n) {
                return Err(Error::Serialize(format!("non-finite or malformed number `{n}`")));
            }
        }
    }
    Ok(match format {
        Format::Json => json::serialize(r),
        Format::Xml => xml::serialize(r),
        Format::Yaml => yaml::serialize(r),
        Format::PyLiteral => pyliteral::serialize(r),
    })
}

pub fn parse(s: &str, format: Format, shape: Shape) -> ParseOutcome {
    if let Some(c) = s.chars().find(|&c| c == '\u{FFFD}' || (c.is_control() && c != '\n')) {
        return fail(FailureKind::TokenizerArtifact, format!("unexpected character {c:?}"));
    }
    let pairs = match format {
        Format::Json => json::parse(s, shape)?,
        Format::Xml => xml::parse(s)?,
        Format::Yaml => yaml::parse(s, shape)?,
        Format::PyLiteral => pyliteral::parse(s, shape)?,
    };
    build(shape, pairs)
}

fn build(shape: Shape, pairs: Vec<(String, Value)>) -> ParseOutcome {
    for (i, (k, v)) in pairs.iter().enumerate() {
        if k.is_empty() {
            return fail(FailureKind::TypeError, "empty key");
        }
        let dup = match shape {
            Shape::Dict => pairs[..i].iter().any(|(k2, _)| k2 == k),
            Shape::TupleSet => pairs[..i].iter().any(|(k2, v2)| k2 == k && v2 == v),
        };
        if dup {
            return fail(FailureKind::DuplicateKey, format!("`{k}` appears twice"));
        }
    }
    Ok(Record { pairs, shape })
}

/// Seeded Fisher-Yates permutation of the pairs.
pub fn shuffle_pairs(r: &Record, seed: u64) -> Record {
    let mut pairs = r.pairs.clone();
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Record { pairs, shape: r.shape }
}

/// Pairs sorted by (key, value).
pub fn canonicalize(r: &Record) -> Record {
    let mut pairs = r.pairs.clone();
    pairs.sort();
    Record { pairs, shape: r.shape }
}

/// Character cursor shared by the parsers.
pub(crate) struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(s: &'a str) -> Self {
        Cursor { s, pos: 0 }
    }

    pub(crate) fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    pub(crate) fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    pub(crate) fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    pub(crate) fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    pub(crate) fn expect(&mut self, lit: &str) -> std::result::Result<(), ParseFailure> {
        if self.eat(lit) {
            Ok(())
        } else {
            fail(
                FailureKind::GrammarViolation,
                format!("expected `{lit}` at byte {}", self.pos),
            )
        }
    }

    pub(crate) fn skip_spaces(&mut self) {
        while self.peek() == Some(' ') {
            self.pos += 1;
        }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.s.len()
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    /// Consume a bare scalar token (number or keyword) made of
    /// `[A-Za-z0-9+-.]` and classify it.
    pub(crate) fn bare_scalar(&mut self, keywords: &[&str]) -> std::result::Result<Value, ParseFailure> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.') {
                self.pos += 1;
            } else {
                break;
            }
        }
        let tok = &self.s[start..self.pos];
        if tok.is_empty() {
            return fail(
                FailureKind::GrammarViolation,
                format!("expected a value at byte {start}"),
            );
        }
        if keywords.contains(&tok) {
            return fail(FailureKind::TypeError, format!("`{tok}` is not a string or number"));
        }
        if is_number(tok) {
            Ok(Value::Num(tok.to_string()))
        } else {
            fail(FailureKind::GrammarViolation, format!("malformed scalar `{tok}`"))
        }
    }
}

pub(crate) fn expect_end(c: &Cursor) -> std::result::Result<(), ParseFailure> {
    if c.at_end() {
        Ok(())
    } else {
        fail(
            FailureKind::GrammarViolation,
            format!("trailing input at byte {}", c.pos()),
        )
    }
}
