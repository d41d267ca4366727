//! Greedy longest-match tokenizer over a frequency-merged vocabulary.
//!
//! Every vocabulary contains single-character tokens for printable ASCII
//! plus tab/newline/carriage return, and one byte token for each non-ASCII
//! UTF-8 byte, so any string tokenizes losslessly. Merged tokens are learned
//! from a corpus by repeatedly joining the most frequent adjacent pair inside
//! whitespace-delimited pieces (a piece keeps its leading space, so `" obama"`
//! and `"obama"` are different tokens). With `digit_split` no merged token
//! contains an ASCII digit.
//!
//! Structural symbols (`{`, `'`, ...) can be injected as reserved tokens;
//! tokenize emits them atomically and never lets a merged token span one.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];
const HEADER: &str = "#DOC2DICT-VOCAB v1";
const RESERVED_HEADER: &str = "#RESERVED";

fn base_chars() -> impl Iterator<Item = char> {
    ['\t', '\n', '\r'].into_iter().chain((0x20u8..0x7f).map(char::from))
}

/// Smallest vocabulary size: specials, single ASCII characters and the
/// non-ASCII byte fallback.
pub fn coverage_minimum() -> usize {
    SPECIALS.len() + base_chars().count() + 128
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Token {
    Special(u32),
    Text(String),
    Byte(u8),
    Reserved(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Token>,
    text_ids: HashMap<String, u32>,
    byte_ids: Vec<u32>,
    reserved: BTreeMap<String, u32>,
    max_text_len: usize,
    digit_split: bool,
}

/// Token ids with the byte range of the source text each one covers.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub offsets: Vec<(usize, usize)>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Vocab {
    fn empty(digit_split: bool) -> Self {
        Vocab {
            tokens: Vec::new(),
            text_ids: HashMap::new(),
            byte_ids: vec![0; 128],
            reserved: BTreeMap::new(),
            max_text_len: 0,
            digit_split,
        }
    }

    fn push(&mut self, tok: Token) -> u32 {
        let id = self.tokens.len() as u32;
        match &tok {
            Token::Text(s) => {
                self.text_ids.insert(s.clone(), id);
                self.max_text_len = self.max_text_len.max(s.len());
            }
            Token::Byte(b) => self.byte_ids[(*b - 0x80) as usize] = id,
            Token::Reserved(s) => {
                self.reserved.insert(s.clone(), id);
            }
            Token::Special(_) => {}
        }
        self.tokens.push(tok);
        id
    }

    /// Single-character vocabulary (exactly the coverage minimum).
    pub fn base(digit_split: bool) -> Self {
        let mut v = Vocab::empty(digit_split);
        for i in 0..SPECIALS.len() as u32 {
            v.push(Token::Special(i));
        }
        for c in base_chars() {
            v.push(Token::Text(c.to_string()));
        }
        for b in 0x80..=0xffu8 {
            v.push(Token::Byte(b));
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn digit_split(&self) -> bool {
        self.digit_split
    }

    pub fn token(&self, id: u32) -> Option<&Token> {
        self.tokens.get(id as usize)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn text_id(&self, s: &str) -> Option<u32> {
        self.text_ids.get(s).copied()
    }

    pub fn reserved_id(&self, symbol: &str) -> Option<u32> {
        self.reserved.get(symbol).copied()
    }

    pub fn reserved(&self) -> &BTreeMap<String, u32> {
        &self.reserved
    }

    /// Surface text of a token as it appears in detokenized output.
    pub fn piece(&self, id: u32) -> Option<String> {
        match self.tokens.get(id as usize)? {
            Token::Special(i) => Some(SPECIALS[*i as usize].to_string()),
            Token::Text(s) | Token::Reserved(s) => Some(s.clone()),
            Token::Byte(b) => Some(format!("<0x{b:02X}>")),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER} digit_split={}\n", u8::from(self.digit_split));
        let mut reserved_started = false;
        for tok in &self.tokens {
            match tok {
                Token::Special(i) => out.push_str(SPECIALS[*i as usize]),
                Token::Text(s) => escape_into(&mut out, s),
                Token::Byte(b) => {
                    let _ = write!(out, "\\x{b:02x}");
                }
                Token::Reserved(s) => {
                    if !reserved_started {
                        out.push_str(RESERVED_HEADER);
                        out.push('\n');
                        reserved_started = true;
                    }
                    escape_into(&mut out, s);
                }
            }
            out.push('\n');
        }
        if !reserved_started {
            out.push_str(RESERVED_HEADER);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or_default();
        let digit_split = match header.strip_prefix(HEADER) {
            Some(" digit_split=0") => false,
            Some(" digit_split=1") => true,
            _ => return Err(Error::Vocab(format!("bad header line `{header}`"))),
        };
        let mut v = Vocab::empty(digit_split);
        let mut in_reserved = false;
        let mut reserved_seen = false;
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            if line.is_empty() {
                continue;
            }
            if line == RESERVED_HEADER {
                if reserved_seen {
                    return Err(Error::Vocab(format!("line {lineno}: duplicate {RESERVED_HEADER}")));
                }
                in_reserved = true;
                reserved_seen = true;
                continue;
            }
            let id = v.tokens.len();
            if id < SPECIALS.len() {
                if line != SPECIALS[id] {
                    return Err(Error::Vocab(format!("line {lineno}: expected {}", SPECIALS[id])));
                }
                v.push(Token::Special(id as u32));
                continue;
            }
            let tok = unescape(line).map_err(|e| Error::Vocab(format!("line {lineno}: {e}")))?;
            let tok = match (tok, in_reserved) {
                (Unescaped::Byte(_), true) => {
                    return Err(Error::Vocab(format!("line {lineno}: byte token in reserved section")))
                }
                (Unescaped::Byte(b), false) if b >= 0x80 => Token::Byte(b),
                (Unescaped::Byte(b), false) => {
                    return Err(Error::Vocab(format!("line {lineno}: byte token \\x{b:02x} is ASCII")))
                }
                (Unescaped::Text(s), true) => {
                    if v.reserved.contains_key(&s) {
                        return Err(Error::Vocab(format!("line {lineno}: duplicate reserved `{s}`")));
                    }
                    Token::Reserved(s)
                }
                (Unescaped::Text(s), false) => {
                    if v.text_ids.contains_key(&s) {
                        return Err(Error::Vocab(format!("line {lineno}: duplicate token `{s}`")));
                    }
                    Token::Text(s)
                }
            };
            v.push(tok);
        }
        if !reserved_seen {
            return Err(Error::Vocab(format!("missing {RESERVED_HEADER} section")));
        }
        let base = Vocab::base(digit_split);
        for t in &base.tokens[SPECIALS.len()..] {
            let present = match t {
                Token::Text(s) => v.text_ids.contains_key(s),
                Token::Byte(b) => v.tokens.iter().any(|x| x == &Token::Byte(*b)),
                _ => true,
            };
            if !present {
                return Err(Error::Vocab(format!("missing coverage token {t:?}")));
            }
        }
        Ok(v)
    }
}

fn escape_into(out: &mut String, s: &str) {
    if s.starts_with('#') {
        out.push('\\');
    }
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
}

enum Unescaped {
    Text(String),
    Byte(u8),
}

fn unescape(line: &str) -> std::result::Result<Unescaped, String> {
    if let Some(hex) = line.strip_prefix("\\x") {
        return u8::from_str_radix(hex, 16)
            .map(Unescaped::Byte)
            .map_err(|_| format!("bad byte escape `{line}`"));
    }
    let mut out = String::new();
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('#') if out.is_empty() => out.push('#'),
            other => {
                return Err(format!(
                    "bad escape `\\{}`",
                    other.map(String::from).unwrap_or_default()
                ))
            }
        }
    }
    Ok(Unescaped::Text(out))
}

/// Split text into merge pieces: a maximal non-whitespace run with at most
/// one leading space, or a single other whitespace character.
fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let start = i;
        let c = text[i..].chars().next().unwrap();
        if c.is_whitespace() && c != ' ' {
            i += c.len_utf8();
            out.push(&text[start..i]);
            continue;
        }
        if c == ' ' {
            i += 1;
        }
        while i < text.len() {
            let c = text[i..].chars().next().unwrap();
            if c.is_whitespace() {
                break;
            }
            i += c.len_utf8();
        }
        out.push(&text[start..i]);
    }
    out
}

/// Learn a merge vocabulary of at most `size` tokens from `corpus`.
pub fn build_vocab<'c, I>(corpus: I, size: usize, digit_split: bool) -> Result<Vocab>
where
    I: IntoIterator<Item = &'c str>,
{
    let min = coverage_minimum();
    if size < min {
        return Err(Error::Vocab(format!("size {size} is below the coverage minimum {min}")));
    }
    let mut v = Vocab::base(digit_split);
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for text in corpus {
        for p in pieces(text) {
            *freq.entry(p).or_default() += 1;
        }
    }
    // deterministic piece order
    let mut words: Vec<(Vec<String>, usize)> = {
        let mut f: Vec<_> = freq.into_iter().collect();
        f.sort_unstable();
        f.into_iter()
            .map(|(p, n)| (p.chars().map(String::from).collect(), n))
            .collect()
    };
    let mergeable = |s: &str| !(digit_split && s.bytes().any(|b| b.is_ascii_digit()));

    while v.len() < size {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                if mergeable(&w[0]) && mergeable(&w[1]) {
                    *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
                }
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, n)| n >= 2)
            .max_by(|(pa, na), (pb, nb)| na.cmp(nb).then_with(|| pb.cmp(pa)));
        let Some(((a, b), _)) = best else { break };
        let (a, b) = (a.to_string(), b.to_string());
        let merged = format!("{a}{b}");
        for (syms, _) in words.iter_mut() {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == a && syms[i + 1] == b {
                    syms[i] = merged.clone();
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        if !v.text_ids.contains_key(&merged) {
            v.push(Token::Text(merged));
        }
    }
    Ok(v)
}

/// Add reserved ids for `symbols`, assigned in alphabetical order.
pub fn inject_structural_tokens(v: &Vocab, symbols: &[&str]) -> Result<Vocab> {
    if symbols.is_empty() {
        return Err(Error::Vocab("no structural symbols given".into()));
    }
    let mut sorted: Vec<&str> = symbols.to_vec();
    sorted.sort_unstable();
    let mut out = v.clone();
    for (i, s) in sorted.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::Vocab("empty structural symbol".into()));
        }
        if out.reserved.contains_key(*s) || (i > 0 && sorted[i - 1] == *s) {
            return Err(Error::Vocab(format!("structural symbol `{s}` is already reserved")));
        }
        out.push(Token::Reserved(s.to_string()));
    }
    Ok(out)
}

fn reserved_at(v: &Vocab, text: &str, i: usize) -> Option<(u32, usize)> {
    let rest = &text[i..];
    v.reserved
        .iter()
        .filter(|(s, _)| rest.starts_with(s.as_str()))
        .max_by_key(|(s, _)| s.len())
        .map(|(s, &id)| (id, s.len()))
}

pub fn tokenize(text: &str, v: &Vocab) -> TokenSeq {
    let mut seq = TokenSeq::default();
    let mut i = 0;
    while i < text.len() {
        if let Some((id, len)) = reserved_at(v, text, i) {
            seq.ids.push(id);
            seq.offsets.push((i, i + len));
            i += len;
            continue;
        }
        // plain segment up to the next reserved symbol
        let mut end = i;
        while end < text.len() {
            end += text[end..].chars().next().unwrap().len_utf8();
            if end < text.len() && reserved_at(v, text, end).is_some() {
                break;
            }
        }
        while i < end {
            let mut matched = None;
            let longest = v.max_text_len.min(end - i);
            for len in (1..=longest).rev() {
                if !text.is_char_boundary(i + len) {
                    continue;
                }
                if let Some(&id) = v.text_ids.get(&text[i..i + len]) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    seq.ids.push(id);
                    seq.offsets.push((i, i + len));
                    i += len;
                }
                None => {
                    let c = text[i..].chars().next().unwrap();
                    let mut buf = [0u8; 4];
                    for (k, b) in c.encode_utf8(&mut buf).bytes().enumerate() {
                        let id = if b >= 0x80 {
                            v.byte_ids[(b - 0x80) as usize]
                        } else {
                            v.text_ids[&char::from(b).to_string()]
                        };
                        seq.ids.push(id);
                        seq.offsets.push((i + k, i + k + 1));
                    }
                    i += c.len_utf8();
                }
            }
        }
    }
    seq
}

/// Inverse of [`tokenize`]. Stray special tokens and malformed byte runs
/// (possible in generated sequences) render as U+FFFD.
pub fn detokenize(ids: &[u32], v: &Vocab) -> String {
    let mut out = String::new();
    let mut bytes: Vec<u8> = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        if !bytes.is_empty() {
            out.push_str(&String::from_utf8_lossy(bytes));
            bytes.clear();
        }
    };
    for &id in ids {
        match v.tokens.get(id as usize) {
            Some(Token::Byte(b)) => bytes.push(*b),
            Some(Token::Text(s)) | Some(Token::Reserved(s)) => {
                flush(&mut bytes, &mut out);
                out.push_str(s);
            }
            Some(Token::Special(_)) | None => {
                flush(&mut bytes, &mut out);
                out.push('\u{FFFD}');
            }
        }
    }
    flush(&mut bytes, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequent_pair_is_merged() {
        let v = build_vocab(["aaaa"], 1000, false).unwrap();
        assert!(v.text_id("aa").is_some());
    }

    #[test]
    fn digit_split_blocks_digit_merges() {
        let corpus = ["123123123 a1a1a1 2019 2019 2019 abcabc"];
        let v = build_vocab(corpus, 1000, true).unwrap();
        for t in v.tokens() {
            if let Token::Text(s) = t {
                if s.chars().count() > 1 {
                    assert!(!s.bytes().any(|b| b.is_ascii_digit()), "{s:?}");
                }
            }
        }
        let merged = build_vocab(corpus, 1000, false).unwrap();
        assert!(merged.text_id("123").is_some() || merged.text_id("12").is_some());
    }

    #[test]
    fn minimum_size_is_the_single_character_set() {
        let v = build_vocab(["hello hello world"], coverage_minimum(), false).unwrap();
        assert_eq!(v, Vocab::base(false));
        assert!(build_vocab(["x"], coverage_minimum() - 1, false).is_err());
    }

    #[test]
    fn digits_tokenize_per_character_under_digit_split() {
        let v = build_vocab(["123456 123456 123456"], 400, true).unwrap();
        let seq = tokenize("123456", &v);
        let pieces: Vec<String> = seq.ids.iter().map(|&i| v.piece(i).unwrap()).collect();
        assert_eq!(pieces, ["1", "2", "3", "4", "5", "6"]);
    }

    #[test]
    fn empty_text_is_empty_sequence() {
        assert!(tokenize("", &Vocab::base(false)).is_empty());
    }

    #[test]
    fn leading_space_tokens_are_learned() {
        let v = build_vocab(["barack obama barack obama barack obama"], 400, false).unwrap();
        assert!(v.text_id(" obama").is_some());
        let seq = tokenize("barack obama", &v);
        let pieces: Vec<String> = seq.ids.iter().map(|&i| v.piece(i).unwrap()).collect();
        assert_eq!(pieces, ["barack", " obama"]);
    }

    #[test]
    fn structural_symbols_are_atomic() {
        let v = build_vocab(["{'a' {'a' {'a' {'a'"], 400, false).unwrap();
        let v = inject_structural_tokens(&v, &["{", "}", "'", ":", ","]).unwrap();
        let seq = tokenize("{'a'", &v);
        assert_eq!(seq.ids[0], v.reserved_id("{").unwrap());
        assert_eq!(seq.ids[1], v.reserved_id("'").unwrap());
        assert!(inject_structural_tokens(&v, &["{"]).is_err());
        assert!(inject_structural_tokens(&v, &["(", ")"]).is_ok());
    }

    #[test]
    fn reserved_ids_follow_alphabetical_order() {
        let v = inject_structural_tokens(&Vocab::base(false), &["}", "{", "'"]).unwrap();
        let n = Vocab::base(false).len() as u32;
        assert_eq!(v.reserved_id("'"), Some(n));
        assert_eq!(v.reserved_id("{"), Some(n + 1));
        assert_eq!(v.reserved_id("}"), Some(n + 2));
    }

    #[test]
    fn non_ascii_round_trips_through_bytes() {
        let v = Vocab::base(false);
        for s in ["naïve café", "日本語", "emoji 🦀!", "tab\tand\nnewline"] {
            assert_eq!(detokenize(&tokenize(s, &v).ids, &v), s);
        }
    }

    #[test]
    fn vocab_file_round_trip_is_bit_exact() {
        let corpus = ["#hash \\slash 'quoted' line\nbreak ## ##", "hello world hello world"];
        let v = build_vocab(corpus, 300, false).unwrap();
        let v = inject_structural_tokens(&v, &["{", "}", "#", "\\"]).unwrap();
        let text = v.to_text();
        let back = Vocab::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn corrupt_vocab_file_is_rejected() {
        let text = Vocab::base(false).to_text();
        assert!(Vocab::from_text(&text.replacen("<bos>", "<xx>", 1)).is_err());
        assert!(Vocab::from_text(&text.replace("#RESERVED\n", "")).is_err());
        assert!(Vocab::from_text("garbage").is_err());
    }
}
