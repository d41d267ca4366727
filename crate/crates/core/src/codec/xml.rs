//! `<record><field name="k">v</field>...</record>`; numeric values carry
//! `type="num"`. Both shapes share the element layout.

use super::{expect_end, fail, is_number, Cursor, FailureKind, ParseFailure, Record, Value};

type Res<T> = std::result::Result<T, ParseFailure>;

fn escape(out: &mut String, s: &str) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c if c.is_control() => out.push_str(&format!("&#x{:x};", c as u32)),
            c => out.push(c),
        }
    }
}

pub(super) fn serialize(r: &Record) -> String {
    let mut out = String::from("<record>");
    for (k, v) in r.pairs() {
        out.push_str("<field name=\"");
        escape(&mut out, k);
        out.push('"');
        if v.is_num() {
            out.push_str(" type=\"num\"");
        }
        out.push('>');
        escape(&mut out, v.as_str());
        out.push_str("</field>");
    }
    out.push_str("</record>");
    out
}

fn entity(c: &mut Cursor) -> Res<char> {
    c.expect("&")?;
    let rest = c.rest();
    let Some(end) = rest.find(';').filter(|&e| e <= 10) else {
        return fail(FailureKind::GrammarViolation, "unterminated entity");
    };
    let name = &rest[..end];
    let ch = match name {
        "amp" => Some('&'),
        "lt" => Some('<'),
        "gt" => Some('>'),
        "quot" => Some('"'),
        "apos" => Some('\''),
        _ => {
            let code = if let Some(h) = name.strip_prefix("#x") {
                u32::from_str_radix(h, 16).ok()
            } else if let Some(d) = name.strip_prefix('#') {
                d.parse().ok()
            } else {
                None
            };
            code.and_then(char::from_u32)
        }
    };
    match ch {
        Some(ch) => {
            for _ in 0..=end {
                c.bump();
            }
            Ok(ch)
        }
        None => fail(FailureKind::GrammarViolation, format!("unknown entity `&{name};`")),
    }
}

/// Character data up to (not including) `stop`.
fn chars_until(c: &mut Cursor, stop: char) -> Res<String> {
    let mut out = String::new();
    loop {
        match c.peek() {
            None => return fail(FailureKind::GrammarViolation, "unexpected end of input"),
            Some(ch) if ch == stop => return Ok(out),
            Some('&') => out.push(entity(c)?),
            Some('<') | Some('>') | Some('\n') => {
                return fail(
                    FailureKind::GrammarViolation,
                    format!("raw markup character at byte {}", c.pos()),
                )
            }
            Some(ch) => {
                out.push(ch);
                c.bump();
            }
        }
    }
}

pub(super) fn parse(s: &str) -> Res<Vec<(String, Value)>> {
    let mut c = Cursor::new(s);
    let mut pairs = Vec::new();
    c.expect("<record>")?;
    loop {
        if c.eat("</record>") {
            break;
        }
        c.expect("<field name=\"")?;
        let key = chars_until(&mut c, '"')?;
        c.expect("\"")?;
        let num = c.eat(" type=\"num\"");
        c.expect(">")?;
        let text = chars_until(&mut c, '<')?;
        if !c.eat("</field>") {
            let nested = c.rest().starts_with("<field") || c.rest().starts_with("<record");
            let kind = if nested {
                FailureKind::TypeError
            } else {
                FailureKind::GrammarViolation
            };
            return fail(kind, format!("expected `</field>` at byte {}", c.pos()));
        }
        let value = if num {
            if !is_number(&text) {
                return fail(FailureKind::GrammarViolation, format!("`{text}` is not a number"));
            }
            Value::Num(text)
        } else {
            Value::Str(text)
        };
        pairs.push((key, value));
    }
    expect_end(&c)?;
    Ok(pairs)
}
