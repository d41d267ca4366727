//! `{"k": v, ...}` for dicts, `[["k", v], ...]` for tuple sets.

use super::{expect_end, fail, Cursor, FailureKind, ParseFailure, Record, Shape, Value};

type Res<T> = std::result::Result<T, ParseFailure>;

const KEYWORDS: &[&str] = &["true", "false", "null"];

pub(super) fn quote(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if c.is_control() => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
}

pub(super) fn value(out: &mut String, v: &Value) {
    match v {
        Value::Str(s) => quote(out, s),
        Value::Num(n) => out.push_str(n),
    }
}

pub(super) fn serialize(r: &Record) -> String {
    let mut out = String::new();
    match r.shape() {
        Shape::Dict => {
            out.push('{');
            for (i, (k, v)) in r.pairs().iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                quote(&mut out, k);
                out.push_str(": ");
                value(&mut out, v);
            }
            out.push('}');
        }
        Shape::TupleSet => {
            out.push('[');
            for (i, (k, v)) in r.pairs().iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                out.push('[');
                quote(&mut out, k);
                out.push_str(", ");
                value(&mut out, v);
                out.push(']');
            }
            out.push(']');
        }
    }
    out
}

fn hex4(c: &mut Cursor) -> Res<u32> {
    let mut v = 0;
    for _ in 0..4 {
        match c.bump().and_then(|ch| ch.to_digit(16)) {
            Some(d) => v = v * 16 + d,
            None => return fail(FailureKind::GrammarViolation, "bad \\u escape"),
        }
    }
    Ok(v)
}

/// Double-quoted string with JSON escapes; the cursor sits on the opening quote.
pub(super) fn string(c: &mut Cursor) -> Res<String> {
    c.expect("\"")?;
    let mut out = String::new();
    loop {
        match c.bump() {
            None => return fail(FailureKind::GrammarViolation, "unterminated string"),
            Some('"') => return Ok(out),
            Some('\n') => return fail(FailureKind::GrammarViolation, "raw newline in string"),
            Some('\\') => match c.bump() {
                Some('"') => out.push('"'),
                Some('\\') => out.push('\\'),
                Some('/') => out.push('/'),
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                Some('r') => out.push('\r'),
                Some('b') => out.push('\u{8}'),
                Some('f') => out.push('\u{c}'),
                Some('u') => {
                    let hi = hex4(c)?;
                    let code = if (0xd800..0xdc00).contains(&hi) {
                        c.expect("\\u")?;
                        let lo = hex4(c)?;
                        if !(0xdc00..0xe000).contains(&lo) {
                            return fail(FailureKind::GrammarViolation, "unpaired surrogate");
                        }
                        0x10000 + ((hi - 0xd800) << 10) + (lo - 0xdc00)
                    } else {
                        hi
                    };
                    match char::from_u32(code) {
                        Some(ch) => out.push(ch),
                        None => return fail(FailureKind::GrammarViolation, "invalid code point"),
                    }
                }
                _ => return fail(FailureKind::GrammarViolation, "bad escape"),
            },
            Some(ch) => out.push(ch),
        }
    }
}

fn scalar(c: &mut Cursor) -> Res<Value> {
    match c.peek() {
        Some('"') => Ok(Value::Str(string(c)?)),
        Some('{') | Some('[') => fail(FailureKind::TypeError, "nested value"),
        _ => c.bare_scalar(KEYWORDS),
    }
}

fn key(c: &mut Cursor) -> Res<String> {
    match c.peek() {
        Some('"') => string(c),
        Some(ch) if ch.is_ascii_alphanumeric() || ch == '-' || ch == '{' || ch == '[' => {
            fail(FailureKind::TypeError, "key is not a string")
        }
        _ => fail(
            FailureKind::GrammarViolation,
            format!("expected key at byte {}", c.pos()),
        ),
    }
}

/// Comma-separated items between `open` and `close`.
fn items(c: &mut Cursor, open: &str, close: &str, mut item: impl FnMut(&mut Cursor) -> Res<()>) -> Res<()> {
    c.expect(open)?;
    c.skip_spaces();
    if c.eat(close) {
        return Ok(());
    }
    loop {
        item(c)?;
        c.skip_spaces();
        if c.eat(close) {
            return Ok(());
        }
        c.expect(",")?;
        c.skip_spaces();
    }
}

pub(super) fn parse(s: &str, shape: Shape) -> Res<Vec<(String, Value)>> {
    let mut c = Cursor::new(s);
    let mut pairs = Vec::new();
    c.skip_spaces();
    match shape {
        Shape::Dict => items(&mut c, "{", "}", |c| {
            let k = key(c)?;
            c.skip_spaces();
            c.expect(":")?;
            c.skip_spaces();
            pairs.push((k, scalar(c)?));
            Ok(())
        })?,
        Shape::TupleSet => items(&mut c, "[", "]", |c| {
            if c.peek() != Some('[') {
                return match c.peek() {
                    Some('"') | Some('{') => fail(FailureKind::TypeError, "pair is not a 2-element array"),
                    _ => fail(
                        FailureKind::GrammarViolation,
                        format!("expected `[` at byte {}", c.pos()),
                    ),
                };
            }
            let mut k = None;
            let mut v = None;
            let mut n = 0;
            items(c, "[", "]", |c| {
                match n {
                    0 => k = Some(key(c)?),
                    1 => v = Some(scalar(c)?),
                    _ => return fail(FailureKind::TypeError, "pair has more than 2 elements"),
                }
                n += 1;
                Ok(())
            })?;
            match (k, v) {
                (Some(k), Some(v)) => {
                    pairs.push((k, v));
                    Ok(())
                }
                _ => fail(FailureKind::TypeError, "pair has fewer than 2 elements"),
            }
        })?,
    }
    c.skip_spaces();
    expect_end(&c)?;
    Ok(pairs)
}
