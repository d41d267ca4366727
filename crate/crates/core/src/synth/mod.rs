//! Synthetic standardization tasks and a long-document extraction task.

pub mod gazetteer;

use chrono::{Datelike, Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{Record, Shape};
use crate::dataset::{Example, GoldSpan};
use crate::error::{Error, Result};

/// Source string and its standardized form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub input: String,
    pub target: String,
}

impl Pair {
    /// Single-field record keyed `value`.
    pub fn to_example(&self) -> Example {
        Example {
            input: self.input.clone(),
            record: Record::strings(Shape::Dict, [("value", self.target.as_str())]).expect("one key"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Independent seed streams for the two splits.
pub fn split_seed(seed: u64, split: Split) -> u64 {
    match split {
        Split::Train => seed,
        Split::Eval => seed ^ 0x5EED_E7A1_0000_0001,
    }
}

const MONTHS: [&str; 12] = [
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];

/// The ten source formats, as strftime-like patterns (`%o` is the ordinal
/// day, `%-d`/`%-m` drop the leading zero).
pub const DATE_FORMATS: [&str; 10] = [
    "%B %o, %Y",
    "%d/%m/%Y",
    "%Y-%m-%d",
    "%-d %B %Y",
    "%B %-d, %Y",
    "%a, %d %b %Y",
    "%d-%b-%y",
    "the %o of %B, %Y",
    "%Y%m%d",
    "%-m.%-d.%y",
];

fn ordinal(d: u32) -> String {
    let suffix = match (d % 10, d % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{d}{suffix}")
}

pub fn render_date(date: NaiveDate, format: usize) -> String {
    let pattern = DATE_FORMATS[format];
    let month = MONTHS[date.month0() as usize];
    pattern
        .replace("%o", &ordinal(date.day()))
        .replace("%B", month)
        .replace("%b", &month[..3])
        .replace("%a", &date.weekday().to_string())
        .replace("%Y", &format!("{:04}", date.year()))
        .replace("%y", &format!("{:02}", date.year() % 100))
        .replace("%-m", &date.month().to_string())
        .replace("%-d", &date.day().to_string())
        .replace("%m", &format!("{:02}", date.month()))
        .replace("%d", &format!("{:02}", date.day()))
}

pub fn canonical_date(date: NaiveDate) -> String {
    date.format("%Y/%m/%d").to_string()
}

fn first_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(1950, 1, 1).expect("valid date")
}

fn random_date(rng: &mut ChaCha8Rng) -> NaiveDate {
    let last = NaiveDate::from_ymd_opt(2021, 12, 31).expect("valid date");
    let span = (last - first_date()).num_days();
    first_date() + Duration::days(rng.gen_range(0..=span))
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Invalid("n must be at least 1".into()));
    }
    Ok(())
}

pub fn gen_dates(n: usize, seed: u64) -> Result<Vec<Pair>> {
    check_n(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let d = random_date(&mut rng);
            let f = rng.gen_range(0..DATE_FORMATS.len());
            Pair {
                input: render_date(d, f),
                target: canonical_date(d),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Casing {
    Lower,
    Upper,
    Title,
}

/// Casing buckets with probabilities 0.05 / 0.20 / 0.75.
pub fn draw_casing(rng: &mut impl Rng) -> Casing {
    match rng.gen_range(0..100) {
        0..=4 => Casing::Lower,
        5..=24 => Casing::Upper,
        _ => Casing::Title,
    }
}

pub fn gen_names(n: usize, seed: u64, split: Split) -> Result<Vec<Pair>> {
    check_n(n)?;
    let pool: Vec<usize> = (0..gazetteer::size())
        .filter(|&i| gazetteer::is_held_out(i) == (split == Split::Eval))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, split));
    Ok((0..n)
        .map(|_| {
            let name = gazetteer::entry(*pool.choose(&mut rng).expect("nonempty pool"));
            let input = match draw_casing(&mut rng) {
                Casing::Lower => name.to_lowercase(),
                Casing::Upper => name.to_uppercase(),
                Casing::Title => name.clone(),
            };
            Pair {
                input,
                target: name.to_lowercase(),
            }
        })
        .collect())
}

/// Thousands separators and two decimal places.
pub fn format_amount(v: u64) -> String {
    let digits = v.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out + ".00"
}

pub fn gen_numbers(n: usize, seed: u64) -> Result<Vec<Pair>> {
    check_n(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let v: u64 = rng.gen_range(1_000..=1_000_000_000);
            Pair {
                input: v.to_string(),
                target: format_amount(v),
            }
        })
        .collect())
}

/// Fields the long-document generator can plant.
pub const LONGDOC_FIELDS: [&str; 4] = ["party", "amount", "due_date", "jurisdiction"];

const STATES: [&str; 12] = [
    "Alaska",
    "Arizona",
    "California",
    "Colorado",
    "Delaware",
    "Florida",
    "Georgia",
    "Nevada",
    "New York",
    "Oregon",
    "Texas",
    "Utah",
];

const FILLER: [&str; 20] = [
    "The parties agree to the terms below.",
    "Each party shall keep the other informed.",
    "Notices must be sent in writing.",
    "This page is intentionally left blank.",
    "All prior agreements are superseded.",
    "No waiver shall be effective unless signed.",
    "Headings are for convenience only.",
    "Either party may terminate with notice.",
    "Confidential material must be returned.",
    "The services are provided as described.",
    "Invoices are issued at the end of each month.",
    "Records shall be retained for five years.",
    "Any amendment requires mutual consent.",
    "The schedule forms part of this document.",
    "Signatures may be delivered electronically.",
    "Late payments accrue interest.",
    "This document may be executed in counterparts.",
    "Support is available during business hours.",
    "Each clause is severable from the rest.",
    "Nothing here creates a partnership.",
];

/// One planted field occurrence, as byte offsets into the document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Planted {
    pub key: String,
    pub surface: String,
    pub start: usize,
    pub end: usize,
    pub distractor: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongDoc {
    pub text: String,
    pub record: Record,
    pub planted: Vec<Planted>,
}

impl LongDoc {
    pub fn to_example(&self) -> Example {
        Example {
            input: self.text.clone(),
            record: self.record.clone(),
        }
    }

    /// Locations of the true (non-distractor) values, in char offsets.
    pub fn gold_spans(&self) -> Vec<GoldSpan> {
        let chars = |byte: usize| self.text[..byte].chars().count();
        self.planted
            .iter()
            .filter(|p| !p.distractor)
            .map(|p| GoldSpan {
                key: p.key.clone(),
                start: chars(p.start),
                end: chars(p.end),
            })
            .collect()
    }
}

struct FieldDraw {
    key: &'static str,
    surface: String,
    value: String,
    sentence: (String, String),
    distractor: (String, String),
}

fn draw_field(key: &'static str, rng: &mut ChaCha8Rng) -> FieldDraw {
    let pick = |rng: &mut ChaCha8Rng, xs: &[(&str, &str)]| {
        let (a, b) = xs[rng.gen_range(0..xs.len())];
        (a.to_string(), b.to_string())
    };
    match key {
        "party" => {
            let name = gazetteer::entry(rng.gen_range(0..gazetteer::size()));
            FieldDraw {
                key,
                value: name.to_lowercase(),
                surface: name,
                sentence: pick(
                    rng,
                    &[("This agreement is made with ", "."), ("The counterparty is ", ".")],
                ),
                distractor: ("Copy sent to ".into(), ".".into()),
            }
        }
        "amount" => {
            let v = format!("{}.{:02}", rng.gen_range(100..100_000), rng.gen_range(0..100));
            FieldDraw {
                key,
                surface: v.clone(),
                value: v,
                sentence: pick(rng, &[("Total due: $", "."), ("The total amount is $", ".")]),
                distractor: ("Subtotal: $".into(), ".".into()),
            }
        }
        "due_date" => {
            let d = random_date(rng);
            let f = [0, 3, 4][rng.gen_range(0..3)];
            FieldDraw {
                key,
                surface: render_date(d, f),
                value: canonical_date(d),
                sentence: pick(rng, &[("Payment is due on ", "."), ("The due date is ", ".")]),
                distractor: ("Drafted on ".into(), ".".into()),
            }
        }
        _ => {
            let s = STATES[rng.gen_range(0..STATES.len())];
            FieldDraw {
                key,
                surface: s.to_string(),
                value: s.to_lowercase(),
                sentence: ("This agreement is governed by the laws of ".into(), ".".into()),
                distractor: ("A copy is filed in ".into(), ".".into()),
            }
        }
    }
}

/// Documents of roughly `target_len_tokens` characters (the token count
/// under the base character vocabulary) made of filler sentences, one
/// sentence per requested field at a uniformly random position, and one
/// distractor sentence repeating the first field's surface form.
pub fn gen_longdoc(n: usize, seed: u64, target_len_tokens: usize, fields: &[&str]) -> Result<Vec<LongDoc>> {
    check_n(n)?;
    if target_len_tokens < 64 {
        return Err(Error::Invalid("target_len_tokens must be at least 64".into()));
    }
    if fields.is_empty() {
        return Err(Error::Invalid("at least one field is required".into()));
    }
    let mut keys: Vec<&'static str> = Vec::new();
    for f in fields {
        let k = LONGDOC_FIELDS
            .iter()
            .find(|k| *k == f)
            .ok_or_else(|| Error::Invalid(format!("unknown field `{f}` (known: {})", LONGDOC_FIELDS.join(", "))))?;
        if keys.contains(k) {
            return Err(Error::Invalid(format!("field `{f}` requested twice")));
        }
        keys.push(k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(n);
    for _ in 0..n {
        let draws: Vec<FieldDraw> = keys.iter().map(|k| draw_field(k, &mut rng)).collect();
        // (sentence prefix, surface, suffix, field index, distractor)
        let mut planted: Vec<(String, String, String, usize, bool)> = draws
            .iter()
            .enumerate()
            .map(|(i, d)| (d.sentence.0.clone(), d.surface.clone(), d.sentence.1.clone(), i, false))
            .collect();
        let first = &draws[0];
        planted.push((
            first.distractor.0.clone(),
            first.surface.clone(),
            first.distractor.1.clone(),
            0,
            true,
        ));
        let planted_len: usize = planted.iter().map(|p| p.0.len() + p.1.len() + p.2.len() + 1).sum();
        let mut filler: Vec<&str> = Vec::new();
        let mut len = planted_len;
        loop {
            let s = FILLER[rng.gen_range(0..FILLER.len())];
            if len + s.len() + 1 > target_len_tokens {
                break;
            }
            len += s.len() + 1;
            filler.push(s);
        }
        // Interleave: each planted sentence takes a uniformly random slot.
        let total = filler.len() + planted.len();
        let mut slots: Vec<usize> = (0..total).collect();
        slots.shuffle(&mut rng);
        let mut is_planted = vec![None; total];
        for (p, &slot) in slots.iter().take(planted.len()).enumerate() {
            is_planted[slot] = Some(p);
        }
        let mut text = String::new();
        let mut marks = Vec::new();
        let mut fill = filler.into_iter();
        for slot in is_planted {
            if !text.is_empty() {
                text.push(' ');
            }
            match slot {
                Some(p) => {
                    let (pre, surface, post, field, distractor) = &planted[p];
                    text.push_str(pre);
                    let start = text.len();
                    text.push_str(surface);
                    marks.push(Planted {
                        key: draws[*field].key.to_string(),
                        surface: surface.clone(),
                        start,
                        end: text.len(),
                        distractor: *distractor,
                    });
                    text.push_str(post);
                }
                None => text.push_str(fill.next().expect("slot count matches")),
            }
        }
        marks.sort_by_key(|m| m.start);
        let record = Record::strings(Shape::Dict, draws.iter().map(|d| (d.key, d.value.clone())))?;
        docs.push(LongDoc {
            text,
            record,
            planted: marks,
        });
    }
    Ok(docs)
}
