//! JSONL datasets: one `{"input": string, "record": [[key, value], ...]}`
//! object per line. Values are JSON strings or numbers; numbers keep their
//! source text. Lines may carry gold value locations as
//! `"spans": [[key, start, end], ...]` in character offsets.

use std::io::{BufRead, Write};
use std::path::Path;

use serde_json::{json, Value as Json};

use crate::codec::{Record, Shape, Value};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: String,
    pub record: Record,
}

/// A record as a JSON array of `[key, value]` pairs.
pub fn record_to_json(r: &Record) -> Result<Json> {
    let pairs: Vec<Json> = r
        .pairs()
        .iter()
        .map(|(k, v)| {
            let v = match v {
                Value::Str(s) => Json::String(s.clone()),
                Value::Num(n) => Json::Number(
                    n.parse::<serde_json::Number>()
                        .map_err(|_| Error::Serialize(format!("`{n}` is not a JSON number")))?,
                ),
            };
            Ok(json!([k, v]))
        })
        .collect::<Result<_>>()?;
    Ok(Json::Array(pairs))
}

pub fn example_to_json(e: &Example) -> Result<String> {
    Ok(serde_json::to_string(
        &json!({ "input": e.input, "record": record_to_json(&e.record)? }),
    )?)
}

pub fn example_from_json(line: &str, shape: Shape) -> std::result::Result<Example, String> {
    let v: Json = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = v.as_object().ok_or("expected a JSON object")?;
    let input = obj
        .get("input")
        .and_then(Json::as_str)
        .ok_or("missing string field `input`")?
        .to_string();
    let raw = obj
        .get("record")
        .and_then(Json::as_array)
        .ok_or("missing array field `record`")?;
    let mut pairs = Vec::with_capacity(raw.len());
    for p in raw {
        let kv = p
            .as_array()
            .filter(|a| a.len() == 2)
            .ok_or("record entries must be [key, value]")?;
        let k = kv[0].as_str().ok_or("record keys must be strings")?;
        let v = match &kv[1] {
            Json::String(s) => Value::str(s.clone()),
            Json::Number(n) => Value::num(n.to_string()).map_err(|e| e.to_string())?,
            other => return Err(format!("unsupported value {other}")),
        };
        pairs.push((k.to_string(), v));
    }
    let record = Record::new(shape, pairs).map_err(|e| e.to_string())?;
    Ok(Example { input, record })
}

/// Where a record value sits in its document, as a half-open char range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldSpan {
    pub key: String,
    pub start: usize,
    pub end: usize,
}

pub fn annotated_to_json(e: &Example, spans: &[GoldSpan]) -> Result<String> {
    let mut v: Json = serde_json::from_str(&example_to_json(e)?)?;
    let spans: Vec<Json> = spans.iter().map(|s| json!([s.key, s.start, s.end])).collect();
    v["spans"] = Json::Array(spans);
    Ok(serde_json::to_string(&v)?)
}

/// The `spans` field of a line, if present.
pub fn spans_from_json(line: &str) -> std::result::Result<Option<Vec<GoldSpan>>, String> {
    let v: Json = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let Some(raw) = v.get("spans") else {
        return Ok(None);
    };
    let raw = raw.as_array().ok_or("`spans` must be an array")?;
    let mut out = Vec::with_capacity(raw.len());
    for s in raw {
        let parts = s
            .as_array()
            .filter(|a| a.len() == 3)
            .ok_or("spans must be [key, start, end]")?;
        let key = parts[0].as_str().ok_or("span keys must be strings")?;
        let offset = |j: &Json| {
            j.as_u64()
                .map(|x| x as usize)
                .ok_or("span offsets must be non-negative integers")
        };
        let (start, end) = (offset(&parts[1])?, offset(&parts[2])?);
        if start >= end {
            return Err(format!("empty or reversed span {start}..{end}"));
        }
        out.push(GoldSpan {
            key: key.to_string(),
            start,
            end,
        });
    }
    Ok(Some(out))
}

/// Examples with their optional gold spans.
pub fn load_annotated(path: &Path, shape: Shape) -> Result<Vec<(Example, Option<Vec<GoldSpan>>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg| Error::Dataset { line: i + 1, msg };
        let e = example_from_json(line, shape).map_err(err)?;
        let spans = spans_from_json(line).map_err(err)?;
        if let Some(bad) = spans.iter().flatten().find(|s| s.end > e.input.chars().count()) {
            return Err(err(format!("span {}..{} runs past the document", bad.start, bad.end)));
        }
        out.push((e, spans));
    }
    Ok(out)
}

pub fn write_jsonl(w: &mut impl Write, examples: &[Example]) -> Result<()> {
    for e in examples {
        writeln!(w, "{}", example_to_json(e)?)?;
    }
    Ok(())
}

/// Blank lines are skipped; errors carry the 1-based line number.
pub fn read_jsonl(r: impl BufRead, shape: Shape) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(example_from_json(&line, shape).map_err(|msg| Error::Dataset { line: i + 1, msg })?);
    }
    Ok(out)
}

pub fn save(path: &Path, examples: &[Example]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(&mut f, examples)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path, shape: Shape) -> Result<Vec<Example>> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?), shape)
}
