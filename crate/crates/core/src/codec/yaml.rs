//! Block YAML subset: `k: v` lines for dicts, `- [k, v]` lines for tuple
//! sets, `{}` when empty. Keys are plain when they match
//! `[A-Za-z_][A-Za-z0-9_ -]*` (no trailing space) and double-quoted
//! otherwise; string values are always double-quoted, numbers are plain.

use super::json;
use super::{fail, Cursor, FailureKind, ParseFailure, Record, Shape, Value};

type Res<T> = std::result::Result<T, ParseFailure>;

const KEYWORDS: &[&str] = &[
    "true", "false", "null", "True", "False", "Null", "TRUE", "FALSE", "NULL", "yes", "no",
];

fn plain_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | ' ' | '-')
}

fn is_plain_key(k: &str) -> bool {
    let mut chars = k.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && k.chars().all(plain_char)
        && !k.ends_with(' ')
}

fn key(out: &mut String, k: &str) {
    if is_plain_key(k) {
        out.push_str(k);
    } else {
        json::quote(out, k);
    }
}

pub(super) fn serialize(r: &Record) -> String {
    if r.is_empty() {
        return "{}".into();
    }
    let mut out = String::new();
    for (i, (k, v)) in r.pairs().iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        match r.shape() {
            Shape::Dict => {
                key(&mut out, k);
                out.push_str(": ");
                json::value(&mut out, v);
            }
            Shape::TupleSet => {
                out.push_str("- [");
                key(&mut out, k);
                out.push_str(", ");
                json::value(&mut out, v);
                out.push(']');
            }
        }
    }
    out
}

fn parse_key(c: &mut Cursor) -> Res<String> {
    if c.peek() == Some('"') {
        return json::string(c);
    }
    let start = c.rest();
    let mut n = 0;
    while let Some(ch) = c.peek().filter(|&ch| plain_char(ch)) {
        n += ch.len_utf8();
        c.bump();
    }
    let k = &start[..n];
    if is_plain_key(k) {
        Ok(k.to_string())
    } else if k.is_empty() && matches!(c.peek(), Some('[') | Some('{')) {
        fail(FailureKind::TypeError, "key is not a string")
    } else {
        fail(FailureKind::GrammarViolation, format!("malformed key `{k}`"))
    }
}

fn parse_value(c: &mut Cursor) -> Res<Value> {
    match c.peek() {
        Some('"') => Ok(Value::Str(json::string(c)?)),
        Some('[') | Some('{') => fail(FailureKind::TypeError, "nested value"),
        _ => c.bare_scalar(KEYWORDS),
    }
}

fn line_end(c: &Cursor) -> Res<()> {
    if c.at_end() {
        Ok(())
    } else {
        fail(FailureKind::GrammarViolation, format!("trailing text `{}`", c.rest()))
    }
}

pub(super) fn parse(s: &str, shape: Shape) -> Res<Vec<(String, Value)>> {
    if s == "{}" {
        return Ok(Vec::new());
    }
    if s.is_empty() {
        return fail(FailureKind::GrammarViolation, "empty document");
    }
    let mut pairs = Vec::new();
    for line in s.split('\n') {
        let mut c = Cursor::new(line);
        match shape {
            Shape::Dict => {
                let k = parse_key(&mut c)?;
                c.expect(": ")?;
                pairs.push((k, parse_value(&mut c)?));
            }
            Shape::TupleSet => {
                c.expect("- [")?;
                let k = parse_key(&mut c)?;
                if c.peek() == Some(']') {
                    return fail(FailureKind::TypeError, "pair has fewer than 2 elements");
                }
                c.expect(", ")?;
                let v = parse_value(&mut c)?;
                if c.peek() == Some(',') {
                    return fail(FailureKind::TypeError, "pair has more than 2 elements");
                }
                c.expect("]")?;
                pairs.push((k, v));
            }
        }
        line_end(&c)?;
    }
    Ok(pairs)
}
