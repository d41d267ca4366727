//! Python literal syntax: `{'k': v, ...}` and `{('k', v), ...}`, single-quoted
//! strings. Both shapes render the empty record as `{}`.

use super::{expect_end, fail, Cursor, FailureKind, ParseFailure, Record, Shape, Value};

type Res<T> = std::result::Result<T, ParseFailure>;

const KEYWORDS: &[&str] = &["True", "False", "None"];

fn quote(out: &mut String, s: &str) {
    out.push('\'');
    for c in s.chars() {
        match c {
            '\'' => out.push_str("\\'"),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if c.is_control() => out.push_str(&format!("\\x{:02x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('\'');
}

fn value(out: &mut String, v: &Value) {
    match v {
        Value::Str(s) => quote(out, s),
        Value::Num(n) => out.push_str(n),
    }
}

pub(super) fn serialize(r: &Record) -> String {
    let mut out = String::from("{");
    for (i, (k, v)) in r.pairs().iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        match r.shape() {
            Shape::Dict => {
                quote(&mut out, k);
                out.push_str(": ");
                value(&mut out, v);
            }
            Shape::TupleSet => {
                out.push('(');
                quote(&mut out, k);
                out.push_str(", ");
                value(&mut out, v);
                out.push(')');
            }
        }
    }
    out.push('}');
    out
}

fn string(c: &mut Cursor) -> Res<String> {
    c.expect("'")?;
    let mut out = String::new();
    loop {
        match c.bump() {
            None => return fail(FailureKind::GrammarViolation, "unterminated string"),
            Some('\'') => return Ok(out),
            Some('\n') => return fail(FailureKind::GrammarViolation, "raw newline in string"),
            Some('\\') => match c.bump() {
                Some('\'') => out.push('\''),
                Some('"') => out.push('"'),
                Some('\\') => out.push('\\'),
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                Some('r') => out.push('\r'),
                Some('x') => {
                    let hex: String = (0..2).filter_map(|_| c.bump()).collect();
                    match u32::from_str_radix(&hex, 16).ok().filter(|_| hex.len() == 2) {
                        Some(v) => out.push(char::from_u32(v).expect("byte-range code point")),
                        None => return fail(FailureKind::GrammarViolation, "bad \\x escape"),
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
        Some('\'') => Ok(Value::Str(string(c)?)),
        Some('{') | Some('[') | Some('(') => fail(FailureKind::TypeError, "nested value"),
        _ => c.bare_scalar(KEYWORDS),
    }
}

fn key(c: &mut Cursor) -> Res<String> {
    match c.peek() {
        Some('\'') => string(c),
        Some(ch) if ch.is_ascii_alphanumeric() || matches!(ch, '-' | '{' | '[') => {
            fail(FailureKind::TypeError, "key is not a string")
        }
        _ => fail(
            FailureKind::GrammarViolation,
            format!("expected key at byte {}", c.pos()),
        ),
    }
}

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
    items(&mut c, "{", "}", |c| match shape {
        Shape::Dict => {
            let k = key(c)?;
            c.skip_spaces();
            c.expect(":")?;
            c.skip_spaces();
            pairs.push((k, scalar(c)?));
            Ok(())
        }
        Shape::TupleSet => {
            if c.peek() != Some('(') {
                return fail(
                    FailureKind::GrammarViolation,
                    format!("expected `(` at byte {}", c.pos()),
                );
            }
            let mut k = None;
            let mut v = None;
            let mut n = 0;
            items(c, "(", ")", |c| {
                match n {
                    0 => k = Some(key(c)?),
                    1 => v = Some(scalar(c)?),
                    _ => return fail(FailureKind::TypeError, "tuple has more than 2 elements"),
                }
                n += 1;
                Ok(())
            })?;
            match (k, v) {
                (Some(k), Some(v)) => {
                    pairs.push((k, v));
                    Ok(())
                }
                _ => fail(FailureKind::TypeError, "tuple has fewer than 2 elements"),
            }
        }
    })?;
    c.skip_spaces();
    expect_end(&c)?;
    Ok(pairs)
}
