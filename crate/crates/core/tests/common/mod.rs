#![allow(dead_code)]

pub mod fd;

use doc2dict::codec::{parse, serialize, Format, Record, Shape, Value};
use rand::seq::SliceRandom;
use rand::Rng;

const KEY_CHARS: &[char] = &[
    'a', 'b', 'c', 'k', 'x', 'Z', '_', '0', '7', ' ', '-', '\'', '"', '{', '}', '[', ']', '(', ')', ':', ',', '<', '>',
    '&', ';', '#', '\\', '/', 'é', '日',
];
const VALUE_EXTRA: &[char] = &['\n', '\t', '.', '$'];

fn random_string<R: Rng>(rng: &mut R, min: usize, max: usize, extra: &[char]) -> String {
    let n = rng.gen_range(min..=max);
    (0..n)
        .map(|_| {
            if !extra.is_empty() && rng.gen_bool(0.05) {
                *extra.choose(rng).unwrap()
            } else {
                *KEY_CHARS.choose(rng).unwrap()
            }
        })
        .collect()
}

pub fn random_number<R: Rng>(rng: &mut R) -> String {
    let mut s = String::new();
    if rng.gen_bool(0.2) {
        s.push('-');
    }
    s.push_str(&rng.gen_range(0..100_000u32).to_string());
    if rng.gen_bool(0.3) {
        s.push_str(&format!(".{}", rng.gen_range(0..1000u32)));
    }
    if rng.gen_bool(0.1) {
        s.push_str(&format!("e{}", rng.gen_range(-5..5i32)));
    }
    s
}

pub fn random_record<R: Rng>(rng: &mut R, shape: Shape) -> Record {
    let n = rng.gen_range(0..=6);
    let mut pairs: Vec<(String, Value)> = Vec::new();
    while pairs.len() < n {
        let key = if rng.gen_bool(0.5) {
            ["date", "party", "total", "amount", "n", "due date", "term-2"]
                .choose(rng)
                .unwrap()
                .to_string()
        } else {
            random_string(rng, 1, 8, &[])
        };
        let value = if rng.gen_bool(0.25) {
            Value::Num(random_number(rng))
        } else {
            Value::Str(random_string(rng, 0, 10, VALUE_EXTRA))
        };
        let dup = match shape {
            Shape::Dict => pairs.iter().any(|(k, _)| *k == key),
            Shape::TupleSet => pairs.iter().any(|(k, v)| *k == key && *v == value),
        };
        if !dup {
            pairs.push((key, value));
        }
    }
    Record::new(shape, pairs).unwrap()
}

/// A single-character edit: `removed` chars starting at char index `at` were
/// replaced by `inserted`.
pub struct Mutation {
    pub text: String,
    pub at: usize,
    pub removed: usize,
}

/// Apply one random single-character edit (delete, insert or substitute).
pub fn mutate<R: Rng>(rng: &mut R, s: &str) -> Mutation {
    let mut chars: Vec<char> = s.chars().collect();
    let c = *KEY_CHARS.choose(rng).unwrap();
    let op = if chars.is_empty() { 1 } else { rng.gen_range(0..3) };
    let (at, removed) = match op {
        0 => {
            let at = rng.gen_range(0..chars.len());
            chars.remove(at);
            (at, 1)
        }
        1 => {
            let at = rng.gen_range(0..=chars.len());
            chars.insert(at, c);
            (at, 0)
        }
        _ => {
            let at = rng.gen_range(0..chars.len());
            chars[at] = c;
            (at, 1)
        }
    };
    Mutation {
        text: chars.into_iter().collect(),
        at,
        removed,
    }
}

/// Char span of pair `i`'s key text inside `serialize(r, format)`, found by
/// diffing against a rendering where that key is replaced by a marker.
fn key_span(r: &Record, format: Format, i: usize) -> (usize, usize) {
    let mut pairs = r.pairs().to_vec();
    pairs[i].0 = "\u{e000}".to_string();
    let marked = Record::new(r.shape(), pairs).unwrap();
    let a: Vec<char> = serialize(r, format).unwrap().chars().collect();
    let b: Vec<char> = serialize(&marked, format).unwrap().chars().collect();
    let lcp = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let max_suffix = a.len().min(b.len()) - lcp;
    let lcs = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .take(max_suffix)
        .take_while(|(x, y)| x == y)
        .count();
    (lcp, a.len() - lcs)
}

/// A parse of a mutated string is acceptable when it fails, or when the
/// result keeps every pair in order except one whose value changed, or whose
/// key changed because the edit landed inside that key's own text.
pub fn mutation_is_benign(original: &Record, parsed: &Record, format: Format, m: &Mutation) -> bool {
    if original.len() != parsed.len() {
        return false;
    }
    let diffs: Vec<usize> = (0..original.len())
        .filter(|&i| original.pairs()[i] != parsed.pairs()[i])
        .collect();
    match diffs.as_slice() {
        [] => true,
        [i] => {
            let ((k1, v1), (k2, v2)) = (&original.pairs()[*i], &parsed.pairs()[*i]);
            if k1 == k2 {
                return true;
            }
            let (start, end) = key_span(original, format, *i);
            v1 == v2 && m.at >= start && m.at + m.removed <= end
        }
        _ => false,
    }
}

pub fn check_mutation(r: &Record, format: Format, m: &Mutation) -> Result<(), String> {
    match parse(&m.text, format, r.shape()) {
        Err(_) => Ok(()),
        Ok(back) if mutation_is_benign(r, &back, format, m) => Ok(()),
        Ok(back) => Err(format!(
            "{format}/{}: `{}` mutated to `{}` parsed as {:?}",
            r.shape(),
            serialize(r, format).unwrap(),
            m.text,
            back.pairs()
        )),
    }
}
