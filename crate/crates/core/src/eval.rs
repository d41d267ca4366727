//! Fuzzy value-to-span alignment and entity-level metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::codec::{ParseOutcome, Record};
use crate::error::{Error, Result};

/// Half-open character range of a document.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub matched_text: String,
}

impl Span {
    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Characters that may be inserted or dropped between value characters.
pub fn is_soft(c: char) -> bool {
    matches!(c, ' ' | '.' | ',')
}

/// At most this many soft characters may separate two matched characters.
pub const MAX_GAP: usize = 3;

fn fold_eq(a: char, b: char) -> bool {
    a == b || a.to_lowercase().eq(b.to_lowercase())
}

/// Every non-overlapping occurrence of `value` in `document`, scanning left
/// to right. Case is ignored, and spaces, periods and commas in either
/// string may be skipped (at most [`MAX_GAP`] in a row in the document). A
/// match must start and end on a matched value character and may not sit
/// inside a longer alphanumeric run.
pub fn fuzzy_align(value: &str, document: &str) -> Vec<Span> {
    let core: Vec<char> = value.chars().filter(|&c| !is_soft(c)).collect();
    if core.is_empty() {
        return Vec::new();
    }
    let doc: Vec<char> = document.chars().collect();
    let word = |i: usize| doc.get(i).is_some_and(|c| c.is_alphanumeric());
    let mut spans = Vec::new();
    let mut i = 0;
    while i < doc.len() {
        let matched = (|| {
            if !fold_eq(doc[i], core[0]) || (i > 0 && word(i - 1) && core[0].is_alphanumeric()) {
                return None;
            }
            let mut j = i + 1;
            for &want in &core[1..] {
                let mut gap = 0;
                while j < doc.len() && is_soft(doc[j]) && !fold_eq(doc[j], want) {
                    gap += 1;
                    j += 1;
                }
                if gap > MAX_GAP || j >= doc.len() || !fold_eq(doc[j], want) {
                    return None;
                }
                j += 1;
            }
            let last = core[core.len() - 1];
            if last.is_alphanumeric() && word(j) {
                return None;
            }
            Some(j)
        })();
        match matched {
            Some(end) => {
                spans.push(Span {
                    start: i,
                    end,
                    matched_text: doc[i..end].iter().collect(),
                });
                i = end;
            }
            None => i += 1,
        }
    }
    spans
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AlignmentScore {
    pub precision: f64,
    pub recall: f64,
    pub auto: usize,
    pub gold: usize,
    /// Automatic spans overlapping some gold span.
    pub auto_hits: usize,
    /// Gold spans overlapped by some automatic span.
    pub gold_hits: usize,
}

impl AlignmentScore {
    fn from_counts(auto: usize, gold: usize, auto_hits: usize, gold_hits: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        AlignmentScore {
            precision: ratio(auto_hits, auto),
            recall: ratio(gold_hits, gold),
            auto,
            gold,
            auto_hits,
            gold_hits,
        }
    }

    /// Pool counts, e.g. across documents.
    pub fn merge(&self, other: &AlignmentScore) -> AlignmentScore {
        Self::from_counts(
            self.auto + other.auto,
            self.gold + other.gold,
            self.auto_hits + other.auto_hits,
            self.gold_hits + other.gold_hits,
        )
    }
}

/// Overlap-based precision and recall; an empty side scores 0.
pub fn score_alignment(auto: &[Span], gold: &[Span]) -> AlignmentScore {
    let auto_hits = auto.iter().filter(|a| gold.iter().any(|g| a.overlaps(g))).count();
    let gold_hits = gold.iter().filter(|g| auto.iter().any(|a| a.overlaps(g))).count();
    AlignmentScore::from_counts(auto.len(), gold.len(), auto_hits, gold_hits)
}

/// Per-key fuzzy alignment audit over a set of documents and records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignmentAudit {
    /// Scores from documents that came with gold spans.
    pub per_key: BTreeMap<String, AlignmentScore>,
    pub documents: usize,
    pub annotated: usize,
    pub values: usize,
    /// Values with no automatic span at all.
    pub unmatched: usize,
    /// Values with more than one automatic span.
    pub ambiguous: usize,
}

impl AlignmentAudit {
    /// Align every value of `record` in `document`. Gold spans are
    /// `(key, span)` pairs; `None` means the document is unannotated.
    pub fn add(&mut self, document: &str, record: &Record, gold: Option<&[(String, Span)]>) {
        self.documents += 1;
        if gold.is_some() {
            self.annotated += 1;
        }
        let mut auto_by_key: BTreeMap<&str, Vec<Span>> = BTreeMap::new();
        for (k, v) in record.pairs() {
            let spans = fuzzy_align(v.as_str(), document);
            self.values += 1;
            match spans.len() {
                0 => self.unmatched += 1,
                1 => {}
                _ => self.ambiguous += 1,
            }
            auto_by_key.entry(k).or_default().extend(spans);
        }
        let Some(gold) = gold else {
            return;
        };
        let mut keys: Vec<&str> = auto_by_key.keys().copied().collect();
        keys.extend(gold.iter().map(|(k, _)| k.as_str()));
        keys.sort_unstable();
        keys.dedup();
        for k in keys {
            let mut auto = auto_by_key.remove(k).unwrap_or_default();
            auto.sort();
            auto.dedup();
            let g: Vec<Span> = gold.iter().filter(|(gk, _)| gk == k).map(|(_, s)| s.clone()).collect();
            let score = score_alignment(&auto, &g);
            let e = self.per_key.entry(k.to_string()).or_default();
            *e = e.merge(&score);
        }
    }

    pub fn overall(&self) -> AlignmentScore {
        self.per_key.values().fold(AlignmentScore::default(), |a, s| a.merge(s))
    }

    /// Flat `key=value` lines.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let o = self.overall();
        let _ = writeln!(s, "documents={}", self.documents);
        let _ = writeln!(s, "annotated_documents={}", self.annotated);
        let _ = writeln!(s, "values={}", self.values);
        let _ = writeln!(s, "unmatched_values={}", self.unmatched);
        let _ = writeln!(s, "ambiguous_values={}", self.ambiguous);
        let _ = writeln!(
            s,
            "precision={:.6}\nrecall={:.6}\nauto_spans={}\ngold_spans={}",
            o.precision, o.recall, o.auto, o.gold
        );
        for (k, m) in &self.per_key {
            let _ = writeln!(
                s,
                "key.{k}.precision={:.6}\nkey.{k}.recall={:.6}\nkey.{k}.auto_spans={}\nkey.{k}.gold_spans={}",
                m.precision, m.recall, m.auto, m.gold
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.per_key.keys().map(String::len).max().unwrap_or(3).max(7);
        let mut s = format!(
            "{:<width$}  {:>9}  {:>9}  {:>6}  {:>6}\n",
            "key", "precision", "recall", "auto", "gold"
        );
        let mut row = |name: &str, m: &AlignmentScore| {
            let _ = writeln!(
                s,
                "{name:<width$}  {:>9.4}  {:>9.4}  {:>6}  {:>6}",
                m.precision, m.recall, m.auto, m.gold
            );
        };
        for (k, m) in &self.per_key {
            row(k, m);
        }
        row("overall", &self.overall());
        let _ = writeln!(
            s,
            "{} documents ({} annotated), {} values: {} unmatched, {} ambiguous",
            self.documents, self.annotated, self.values, self.unmatched, self.ambiguous
        );
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Averaging {
    Micro,
    Macro,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, r) = (ratio(tp, predicted), ratio(tp, gold));
        Prf {
            precision: p,
            recall: r,
            f1: if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) },
            tp,
            predicted,
            gold,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub averaging: Averaging,
    /// F1 under the requested averaging.
    pub f1: f64,
    pub micro: Prf,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_key: BTreeMap<String, Prf>,
    pub documents: usize,
    pub parse_failures: usize,
    pub parse_failure_rate: f64,
}

impl MetricReport {
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "averaging={}",
            match self.averaging {
                Averaging::Micro => "micro",
                Averaging::Macro => "macro",
            }
        );
        let _ = writeln!(s, "f1={:.6}", self.f1);
        let _ = writeln!(s, "micro_precision={:.6}", self.micro.precision);
        let _ = writeln!(s, "micro_recall={:.6}", self.micro.recall);
        let _ = writeln!(s, "micro_f1={:.6}", self.micro.f1);
        let _ = writeln!(s, "macro_precision={:.6}", self.macro_precision);
        let _ = writeln!(s, "macro_recall={:.6}", self.macro_recall);
        let _ = writeln!(s, "macro_f1={:.6}", self.macro_f1);
        let _ = writeln!(s, "documents={}", self.documents);
        let _ = writeln!(s, "parse_failures={}", self.parse_failures);
        let _ = writeln!(s, "parse_failure_rate={:.6}", self.parse_failure_rate);
        for (k, m) in &self.per_key {
            let _ = writeln!(
                s,
                "key.{k}.precision={:.6}\nkey.{k}.recall={:.6}\nkey.{k}.f1={:.6}\nkey.{k}.tp={}\nkey.{k}.predicted={}\nkey.{k}.gold={}",
                m.precision, m.recall, m.f1, m.tp, m.predicted, m.gold
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.per_key.keys().map(String::len).max().unwrap_or(3).max(5);
        let mut s = format!("{:<width$}  {:>9}  {:>9}  {:>9}\n", "key", "precision", "recall", "f1");
        for (k, m) in &self.per_key {
            let _ = writeln!(s, "{k:<width$}  {:>9.4}  {:>9.4}  {:>9.4}", m.precision, m.recall, m.f1);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}",
            "micro", self.micro.precision, self.micro.recall, self.micro.f1
        );
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1
        );
        let _ = writeln!(s, "parse failures: {} of {}", self.parse_failures, self.documents);
        s
    }
}

fn norm(s: &str, cased: bool) -> String {
    if cased {
        s.to_string()
    } else {
        s.to_lowercase()
    }
}

/// Matched (key, value) pairs between two records, each gold pair usable once.
pub fn matched_pairs(pred: &Record, gold: &Record, cased: bool) -> usize {
    let mut pool: Vec<(String, String)> = gold
        .pairs()
        .iter()
        .map(|(k, v)| (k.clone(), norm(v.as_str(), cased)))
        .collect();
    let mut tp = 0;
    for (k, v) in pred.pairs() {
        let v = norm(v.as_str(), cased);
        if let Some(i) = pool.iter().position(|(gk, gv)| gk == k && *gv == v) {
            pool.swap_remove(i);
            tp += 1;
        }
    }
    tp
}

/// Entity-level scores. Failed parses count as empty predictions.
pub fn entity_f1(
    predictions: &[ParseOutcome],
    golds: &[Record],
    cased: bool,
    averaging: Averaging,
) -> Result<MetricReport> {
    if predictions.len() != golds.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} gold records",
            predictions.len(),
            golds.len()
        )));
    }
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    let mut failures = 0;
    for (p, g) in predictions.iter().zip(golds) {
        let pred = match p {
            Ok(r) => r.clone(),
            Err(_) => {
                failures += 1;
                Record::empty(g.shape())
            }
        };
        let mut keys: Vec<&str> = pred.keys();
        keys.extend(g.keys());
        keys.sort_unstable();
        keys.dedup();
        for k in keys {
            let sub = |r: &Record| {
                Record::new(
                    crate::codec::Shape::TupleSet,
                    r.pairs().iter().filter(|(rk, _)| rk == k).cloned().collect(),
                )
                .unwrap_or_else(|_| Record::empty(crate::codec::Shape::TupleSet))
            };
            let (pk, gk) = (sub(&pred), sub(g));
            let e = counts.entry(k.to_string()).or_default();
            e.0 += matched_pairs(&pk, &gk, cased);
            e.1 += pred.pairs().iter().filter(|(rk, _)| rk == k).count();
            e.2 += gk.len();
        }
    }
    let per_key: BTreeMap<String, Prf> = counts
        .iter()
        .map(|(k, &(tp, p, g))| (k.clone(), Prf::from_counts(tp, p, g)))
        .collect();
    let (tp, p, g) = counts
        .values()
        .fold((0, 0, 0), |a, &(tp, p, g)| (a.0 + tp, a.1 + p, a.2 + g));
    let micro = Prf::from_counts(tp, p, g);
    let n = per_key.len().max(1) as f64;
    let macro_precision = per_key.values().map(|m| m.precision).sum::<f64>() / n;
    let macro_recall = per_key.values().map(|m| m.recall).sum::<f64>() / n;
    let macro_f1 = per_key.values().map(|m| m.f1).sum::<f64>() / n;
    let documents = golds.len();
    Ok(MetricReport {
        averaging,
        f1: match averaging {
            Averaging::Micro => micro.f1,
            Averaging::Macro => macro_f1,
        },
        micro,
        macro_precision,
        macro_recall,
        macro_f1,
        per_key,
        documents,
        parse_failures: failures,
        parse_failure_rate: if documents == 0 {
            0.0
        } else {
            failures as f64 / documents as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{FailureKind, ParseFailure, Shape};

    fn texts(spans: &[Span]) -> Vec<&str> {
        spans.iter().map(|s| s.matched_text.as_str()).collect()
    }

    #[test]
    fn tolerates_case_and_punctuation() {
        let doc = "the agreement with acme corp signed today";
        let s = fuzzy_align("ACME Corp.", doc);
        assert_eq!(texts(&s), ["acme corp"]);
        assert_eq!(&doc[s[0].start..s[0].end], "acme corp");
        assert_eq!(texts(&fuzzy_align("1,234.00", "pay 1234.00 now")), ["1234.00"]);
        assert_eq!(texts(&fuzzy_align("1234.00", "pay 1, 234.00 now")), ["1, 234.00"]);
        assert_eq!(texts(&fuzzy_align("New York", "in newyork.")), ["newyork"]);
    }

    #[test]
    fn multiple_matches_and_reformatting() {
        let doc = "Subtotal: $100.00 ... Total: $100.00";
        assert_eq!(fuzzy_align("100.00", doc).len(), 2);
        assert!(fuzzy_align("2019/05/07", "signed May 7th, 2019").is_empty());
        assert!(fuzzy_align("100.00", "1100.00").is_empty());
        assert!(fuzzy_align("ab", "a    b").is_empty());
        assert!(fuzzy_align("...", "...").is_empty());
    }

    #[test]
    fn alignment_scores() {
        let sp = |a, b| Span {
            start: a,
            end: b,
            matched_text: String::new(),
        };
        let one = score_alignment(&[sp(0, 3)], &[sp(0, 3)]);
        assert_eq!((one.precision, one.recall), (1.0, 1.0));
        let s = score_alignment(&[sp(0, 3), sp(5, 8), sp(10, 12)], &[sp(6, 7)]);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 1.0);
        let none = score_alignment(&[], &[sp(0, 1)]);
        assert_eq!((none.precision, none.recall), (0.0, 0.0));
    }

    #[test]
    fn f1_examples() {
        let pred = Record::strings(Shape::TupleSet, [("a", "x")]).unwrap();
        let gold = Record::strings(Shape::TupleSet, [("a", "x"), ("b", "y")]).unwrap();
        let r = entity_f1(&[Ok(pred)], std::slice::from_ref(&gold), false, Averaging::Micro).unwrap();
        assert_eq!(r.micro.precision, 1.0);
        assert_eq!(r.micro.recall, 0.5);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);

        let upper = Record::strings(Shape::Dict, [("a", "ACME")]).unwrap();
        let lower = Record::strings(Shape::Dict, [("a", "acme")]).unwrap();
        let r = entity_f1(
            &[Ok(upper.clone())],
            std::slice::from_ref(&lower),
            false,
            Averaging::Micro,
        )
        .unwrap();
        assert_eq!(r.f1, 1.0);
        let r = entity_f1(&[Ok(upper)], &[lower], true, Averaging::Micro).unwrap();
        assert_eq!(r.f1, 0.0);

        let fail = Err(ParseFailure {
            kind: FailureKind::GrammarViolation,
            message: String::new(),
        });
        let r = entity_f1(
            &[fail, Ok(gold.clone())],
            &[gold.clone(), gold.clone()],
            false,
            Averaging::Macro,
        )
        .unwrap();
        assert_eq!(r.parse_failures, 1);
        assert_eq!(r.parse_failure_rate, 0.5);
        assert_eq!(r.micro.recall, 0.5);
        assert!(entity_f1(&[], &[gold], false, Averaging::Micro).is_err());
    }

    #[test]
    fn multi_value_keys_use_multiset_matching() {
        let pred = Record::strings(Shape::TupleSet, [("k", "a"), ("k", "A")]).unwrap();
        let gold = Record::strings(Shape::TupleSet, [("k", "a")]).unwrap();
        let r = entity_f1(&[Ok(pred)], &[gold], false, Averaging::Micro).unwrap();
        assert_eq!((r.micro.tp, r.micro.predicted, r.micro.gold), (1, 2, 1));
    }

    #[test]
    fn audit_pools_keys_and_counts_ambiguity() {
        let doc = "Subtotal: 40.00. Total: 40.00. Party: ACME Inc.";
        let r = Record::strings(
            Shape::Dict,
            [("total", "40.00"), ("party", "acme inc"), ("date", "2019/05/07")],
        )
        .unwrap();
        let at = |needle: &str, nth: usize| {
            let start = doc.match_indices(needle).nth(nth).unwrap().0;
            Span {
                start,
                end: start + needle.len(),
                matched_text: needle.into(),
            }
        };
        let gold = vec![
            ("total".to_string(), at("40.00", 1)),
            ("party".to_string(), at("ACME Inc", 0)),
        ];
        let mut audit = AlignmentAudit::default();
        audit.add(doc, &r, Some(&gold));
        audit.add(doc, &r, None);
        assert_eq!((audit.documents, audit.annotated, audit.values), (2, 1, 6));
        assert_eq!((audit.unmatched, audit.ambiguous), (2, 2));
        assert_eq!(audit.per_key["total"].precision, 0.5);
        assert_eq!(audit.per_key["party"].recall, 1.0);
        assert_eq!(audit.per_key["date"].auto, 0);
        let o = audit.overall();
        assert_eq!((o.auto, o.gold, o.auto_hits, o.gold_hits), (3, 2, 2, 2));
        assert!(audit.to_kv_text().contains("key.total.precision=0.500000"));
        assert!(audit.to_table().contains("overall"));
    }
}
