//! Greedy and beam search over any step-wise scorer.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tokenizer::{BOS, EOS};

/// Produces next-token log-probabilities after consuming `token`.
pub trait StepScorer {
    type State: Clone;

    fn start(&self) -> Self::State;

    fn step(&self, state: &mut Self::State, token: u32) -> Result<Vec<f32>>;

    /// Longest sequence the scorer can extend to.
    fn max_len(&self) -> usize {
        usize::MAX
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    Greedy,
    Beam(usize),
}

impl SearchMode {
    pub fn from_beam(k: usize) -> Self {
        if k <= 1 {
            SearchMode::Greedy
        } else {
            SearchMode::Beam(k)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated ids, ending with `eos` unless truncated.
    pub tokens: Vec<u32>,
    pub log_prob: f32,
    /// `log_prob` divided by the number of generated tokens.
    pub score: f32,
    /// `max_len` was reached without producing `eos`.
    pub truncated: bool,
}

impl Generation {
    fn new(tokens: Vec<u32>, log_prob: f32) -> Self {
        let truncated = tokens.last() != Some(&EOS);
        let score = if tokens.is_empty() {
            0.0
        } else {
            log_prob / tokens.len() as f32
        };
        Generation {
            tokens,
            log_prob,
            score,
            truncated,
        }
    }

    /// Tokens without the trailing `eos`.
    pub fn content(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::Invalid("max_len must be at least 1".into()));
    }
    Ok(())
}

pub fn greedy<S: StepScorer>(scorer: &S, max_len: usize) -> Result<Generation> {
    check(max_len)?;
    let max_len = max_len.min(scorer.max_len());
    let mut state = scorer.start();
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut last = BOS;
    while tokens.len() < max_len {
        let lp = scorer.step(&mut state, last)?;
        let next = argmax(&lp);
        log_prob += lp[next];
        tokens.push(next as u32);
        if next as u32 == EOS {
            break;
        }
        last = next as u32;
    }
    Ok(Generation::new(tokens, log_prob))
}

struct Hyp<St> {
    tokens: Vec<u32>,
    log_prob: f32,
    state: St,
}

/// Length-normalized beam search with `k` live hypotheses. Finished
/// hypotheses are pooled; search stops when the pool holds `k` entries and
/// its best normalized score is at least that of every live hypothesis, or
/// at `max_len`. The result is the best of the pool and whatever is still
/// live at that point.
pub fn beam_search<S: StepScorer>(scorer: &S, k: usize, max_len: usize) -> Result<Generation> {
    check(max_len)?;
    if k == 0 {
        return Err(Error::Invalid("beam size must be at least 1".into()));
    }
    let max_len = max_len.min(scorer.max_len());
    let mut beams = vec![Hyp {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: scorer.start(),
    }];
    let mut finished: Vec<Generation> = Vec::new();
    for _ in 0..max_len {
        // (total log-prob, step log-prob, beam, token)
        let mut cands: Vec<(f32, f32, usize, u32)> = Vec::new();
        let mut stepped = Vec::with_capacity(beams.len());
        for (b, h) in beams.iter().enumerate() {
            let mut st = h.state.clone();
            let lp = scorer.step(&mut st, h.tokens.last().copied().unwrap_or(BOS))?;
            let mut idx: Vec<usize> = (0..lp.len()).collect();
            idx.sort_by(|&i, &j| lp[j].partial_cmp(&lp[i]).unwrap_or(Ordering::Equal).then(i.cmp(&j)));
            for &t in idx.iter().take(k) {
                cands.push((h.log_prob + lp[t], lp[t], b, t as u32));
            }
            stepped.push(st);
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        let mut next = Vec::with_capacity(k);
        for (rank, &(total, _, b, t)) in cands.iter().enumerate() {
            if next.len() == k {
                break;
            }
            let mut tokens = beams[b].tokens.clone();
            tokens.push(t);
            if t == EOS {
                if rank < k {
                    finished.push(Generation::new(tokens, total));
                }
            } else {
                next.push(Hyp {
                    tokens,
                    log_prob: total,
                    state: stepped[b].clone(),
                });
            }
        }
        beams = next;
        if beams.is_empty() {
            break;
        }
        let best_done = finished.iter().map(|g| g.score).fold(f32::NEG_INFINITY, f32::max);
        let best_live = beams
            .iter()
            .map(|h| h.log_prob / h.tokens.len() as f32)
            .fold(f32::NEG_INFINITY, f32::max);
        if finished.len() >= k && best_done >= best_live {
            break;
        }
    }
    let pick = |gens: Vec<Generation>| gens.into_iter().reduce(|a, b| if b.score > a.score { b } else { a });
    let mut pool = finished;
    pool.extend(beams.into_iter().map(|h| Generation::new(h.tokens, h.log_prob)));
    pick(pool).ok_or_else(|| Error::Invalid("beam search produced no hypothesis".into()))
}

pub fn search<S: StepScorer>(scorer: &S, mode: SearchMode, max_len: usize) -> Result<Generation> {
    match mode {
        SearchMode::Greedy => greedy(scorer, max_len),
        SearchMode::Beam(k) => beam_search(scorer, k, max_len),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed table of log-probabilities indexed by step.
    struct Table(Vec<Vec<f32>>);

    impl StepScorer for Table {
        type State = usize;
        fn start(&self) -> usize {
            0
        }
        fn step(&self, s: &mut usize, _: u32) -> Result<Vec<f32>> {
            let row = self.0[(*s).min(self.0.len() - 1)].clone();
            *s += 1;
            Ok(row)
        }
    }

    fn lp(probs: &[f32]) -> Vec<f32> {
        probs.iter().map(|p| p.ln()).collect()
    }

    #[test]
    fn forced_argmax() {
        let mut first = vec![0.01; 8];
        first[5] = 0.93;
        let mut second = vec![0.01; 8];
        second[EOS as usize] = 0.93;
        let t = Table(vec![lp(&first), lp(&second)]);
        let g = greedy(&t, 10).unwrap();
        assert_eq!(g.tokens, vec![5, EOS]);
        assert!(!g.truncated);
        assert_eq!(beam_search(&t, 1, 10).unwrap(), g);
    }

    #[test]
    fn truncation_is_flagged() {
        let mut row = vec![0.01; 8];
        row[4] = 0.93;
        let t = Table(vec![lp(&row)]);
        let g = greedy(&t, 3).unwrap();
        assert_eq!(g.tokens, vec![4, 4, 4]);
        assert!(g.truncated);
        assert!(beam_search(&t, 3, 3).unwrap().truncated);
        assert!(greedy(&t, 0).is_err());
    }

    #[test]
    fn beam_finds_a_better_path_than_greedy() {
        // greedy takes 3 (0.5) then faces a flat distribution; the beam can
        // take 4 (0.4) followed by a confident eos.
        struct Tree;
        impl StepScorer for Tree {
            type State = Vec<u32>;
            fn start(&self) -> Vec<u32> {
                Vec::new()
            }
            fn step(&self, s: &mut Vec<u32>, tok: u32) -> Result<Vec<f32>> {
                if tok != BOS {
                    s.push(tok);
                }
                let mut p = vec![0.02; 6];
                match s.first() {
                    None => {
                        p[3] = 0.5;
                        p[4] = 0.4;
                    }
                    Some(3) => p = vec![1.0 / 6.0; 6],
                    Some(_) => p[EOS as usize] = 0.9,
                }
                Ok(lp(&p))
            }
        }
        let g = greedy(&Tree, 5).unwrap();
        let b = beam_search(&Tree, 2, 5).unwrap();
        assert_eq!(b.tokens, vec![4, EOS]);
        assert!(b.score > g.score);
    }
}
