//! Checkpoint plans and instrumented training steps.
//!
//! The two-level plan wraps each chunk's encoder stack in a segment (so only
//! the chunk's encoder output stays cached after the forward pass) and nests
//! a segment per encoder block inside it; each decoder block is its own
//! segment, so the decoder keeps only its inter-block activations. Backward
//! then re-runs each decoder block once, and re-runs each chunk's encoder
//! (which caches that chunk's block boundaries) before re-running every
//! encoder block a final time for its gradients.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ChunkBatch;
use crate::model::{forward_loss, teacher_forcing_pair, Dropout, Model, ModelConfig, SegmentPolicy};
use crate::tensor::{Gradients, Graph, Meter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanKind {
    None,
    PerBlock,
    TwoLevel,
}

impl PlanKind {
    pub const ALL: [PlanKind; 3] = [PlanKind::None, PlanKind::PerBlock, PlanKind::TwoLevel];

    pub fn name(self) -> &'static str {
        match self {
            PlanKind::None => "none",
            PlanKind::PerBlock => "per-block",
            PlanKind::TwoLevel => "two-level",
        }
    }

    pub fn plan(self, config: &ModelConfig, m: usize) -> CheckpointPlan {
        match self {
            PlanKind::None => CheckpointPlan::none(config, m),
            PlanKind::PerBlock => CheckpointPlan::per_block(config, m),
            PlanKind::TwoLevel => CheckpointPlan::two_level(config, m),
        }
    }
}

impl std::str::FromStr for PlanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlanKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown checkpoint plan `{s}` (none|per-block|two-level)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointPlan {
    pub kind: PlanKind,
    pub m: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Chunks whose whole encoder stack is one segment.
    pub chunk_segments: Vec<usize>,
    /// `(chunk, block)` encoder blocks that are segments.
    pub encoder_boundaries: Vec<(usize, usize)>,
    /// Decoder blocks that are segments.
    pub decoder_boundaries: Vec<usize>,
}

impl CheckpointPlan {
    fn build(kind: PlanKind, config: &ModelConfig, m: usize, outer: bool, blocks: bool) -> Self {
        let (ne, nd) = (config.n_enc_layers, config.n_dec_layers);
        CheckpointPlan {
            kind,
            m,
            n_enc_layers: ne,
            n_dec_layers: nd,
            chunk_segments: if outer { (0..m).collect() } else { Vec::new() },
            encoder_boundaries: if blocks {
                (0..m).flat_map(|i| (0..ne).map(move |l| (i, l))).collect()
            } else {
                Vec::new()
            },
            decoder_boundaries: if blocks { (0..nd).collect() } else { Vec::new() },
        }
    }

    pub fn none(config: &ModelConfig, m: usize) -> Self {
        Self::build(PlanKind::None, config, m, false, false)
    }

    pub fn per_block(config: &ModelConfig, m: usize) -> Self {
        Self::build(PlanKind::PerBlock, config, m, false, true)
    }

    /// With a single chunk there is nothing to gain from caching chunk
    /// outputs separately, so `m == 1` yields the per-block segments.
    pub fn two_level(config: &ModelConfig, m: usize) -> Self {
        Self::build(PlanKind::TwoLevel, config, m, m > 1, true)
    }

    /// Activations that persist after the forward pass.
    pub fn cached_set(&self) -> Vec<String> {
        let mut out: Vec<String> = self.chunk_segments.iter().map(|i| format!("enc_out[{i}]")).collect();
        out.extend(self.decoder_boundaries.iter().map(|l| format!("dec_in[{l}]")));
        out
    }

    /// Check the plan against the model and chunk count and lower it to a
    /// segment policy.
    pub fn policy(&self, config: &ModelConfig, m: usize) -> Result<SegmentPolicy> {
        let mismatch = |msg: String| Err(Error::PlanMismatch(msg));
        if self.m != m {
            return mismatch(format!("plan built for {} chunks, batch has {m}", self.m));
        }
        if self.n_enc_layers != config.n_enc_layers || self.n_dec_layers != config.n_dec_layers {
            return mismatch(format!(
                "plan built for {}+{} layers, model has {}+{}",
                self.n_enc_layers, self.n_dec_layers, config.n_enc_layers, config.n_dec_layers
            ));
        }
        let mut policy = SegmentPolicy::none(m, config.n_enc_layers, config.n_dec_layers);
        let mut seen = BTreeSet::new();
        for &i in &self.chunk_segments {
            if i >= m || !seen.insert(i) {
                return mismatch(format!("chunk segment {i} is out of range or repeated"));
            }
            policy.chunk_outer[i] = true;
        }
        let mut seen = BTreeSet::new();
        for &(i, l) in &self.encoder_boundaries {
            if i >= m || l >= config.n_enc_layers || !seen.insert((i, l)) {
                return mismatch(format!("encoder segment ({i}, {l}) is out of range or repeated"));
            }
            policy.enc_blocks[i][l] = true;
        }
        for &i in &self.chunk_segments {
            if !policy.enc_blocks[i].iter().all(|&b| b) {
                return mismatch(format!("chunk segment {i} must nest a segment for every encoder block"));
            }
        }
        let mut seen = BTreeSet::new();
        for &l in &self.decoder_boundaries {
            if l >= config.n_dec_layers || !seen.insert(l) {
                return mismatch(format!("decoder segment {l} is out of range or repeated"));
            }
            policy.dec_blocks[l] = true;
        }
        Ok(policy)
    }
}

/// Expected forward executions of every block per training step.
pub fn recompute_passes(plan: &CheckpointPlan) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for i in 0..plan.m {
        let outer = usize::from(plan.chunk_segments.contains(&i));
        for l in 0..plan.n_enc_layers {
            let seg = usize::from(plan.encoder_boundaries.contains(&(i, l)));
            out.insert(format!("enc[{i}].{l}"), 1 + seg + outer);
        }
    }
    for l in 0..plan.n_dec_layers {
        let seg = usize::from(plan.decoder_boundaries.contains(&l));
        out.insert(format!("dec.{l}"), 1 + seg);
    }
    out
}

/// What the instrumented accountant saw during one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryTrace {
    pub plan: PlanKind,
    pub m: usize,
    pub target_len: usize,
    /// Peak simultaneously live interior activation scalars.
    pub peak_interior: usize,
    pub passes: BTreeMap<String, usize>,
    pub attention_entries: BTreeMap<String, u64>,
}

impl MemoryTrace {
    pub fn to_kv_text(&self) -> String {
        let mut s = format!(
            "plan={}\nm={}\ntarget_len={}\npeak_interior={}\n",
            self.plan.name(),
            self.m,
            self.target_len,
            self.peak_interior
        );
        for (k, v) in &self.attention_entries {
            let _ = writeln!(s, "attn.{k}={v}");
        }
        for (k, v) in &self.passes {
            let _ = writeln!(s, "passes.{k}={v}");
        }
        s
    }
}

pub struct StepOutput {
    pub loss: f32,
    pub grads: Gradients,
    pub trace: MemoryTrace,
}

/// One teacher-forced forward/backward step under `plan`.
pub fn train_step_checkpointed(
    model: &Model,
    batch: &ChunkBatch,
    target: &[u32],
    plan: &CheckpointPlan,
    drop: Option<Dropout>,
) -> Result<StepOutput> {
    let policy = plan.policy(&model.config, batch.m)?;
    let (dec_in, dec_out) = teacher_forcing_pair(target);
    let meter = Rc::new(Meter::new());
    let (loss, grads) = {
        let mut g = Graph::with_meter(&model.params, meter.clone());
        let out = forward_loss(&mut g, model, batch, &dec_in, &dec_out, &policy, drop)?;
        let loss = g.value(out.loss).item();
        let grads = g.backward(out.loss)?;
        (loss, grads)
    };
    Ok(StepOutput {
        loss,
        grads,
        trace: MemoryTrace {
            plan: plan.kind,
            m: batch.m,
            target_len: dec_in.len(),
            peak_interior: meter.peak(),
            passes: meter.passes(),
            attention_entries: meter.attention(),
        },
    })
}

/// The same step with no segments.
pub fn train_step_direct(
    model: &Model,
    batch: &ChunkBatch,
    target: &[u32],
    drop: Option<Dropout>,
) -> Result<StepOutput> {
    train_step_checkpointed(
        model,
        batch,
        target,
        &CheckpointPlan::none(&model.config, batch.m),
        drop,
    )
}

/// Interior activation scalars held by one block's forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSizes {
    pub encoder_block: usize,
    pub decoder_block: usize,
    /// A chunk's encoder graph with its block outputs cached.
    pub chunk_stack: usize,
}

/// `target_len` counts decoder positions (target tokens plus one).
pub fn block_sizes(config: &ModelConfig, m: usize, target_len: usize) -> BlockSizes {
    let (c, d, h, f, t) = (
        config.chunk_size,
        config.d_model,
        config.n_heads,
        config.d_ff,
        target_len,
    );
    let mem = m * c;
    let drop = config.dropout > 0.0;
    // per attention: q 3nd, k and v 3kd each, scores/scaled/probs 3Hnk, context 4nd
    let attn = |n: usize, k: usize| 7 * n * d + 6 * k * d + 3 * h * n * k;
    let ffn = |n: usize| 2 * n * f + n * d;
    let encoder_block = 4 * c * d + attn(c, c) + ffn(c) + if drop { 2 * c * d } else { 0 };
    let decoder_block = 6 * t * d + attn(t, t) + attn(t, mem) + ffn(t) + if drop { 3 * t * d } else { 0 };
    let chunk_stack = (config.n_enc_layers + 5) * c * d + 2 * d;
    BlockSizes {
        encoder_block,
        decoder_block,
        chunk_stack,
    }
}

/// Predicted peak live interior activation scalars for one training step
/// under [`CheckpointPlan::two_level`].
pub fn peak_activation_model(config: &ModelConfig, m: usize, target_len: usize) -> usize {
    let b = block_sizes(config, m, target_len);
    let (c, d, t, v) = (config.chunk_size, config.d_model, target_len, config.vocab_size);
    let memory = m * c * d;
    let decoder_cache = 3 * t * d + config.n_dec_layers * t * d + t * d + v * d + t * v + 1;
    if m > 1 {
        // cached chunk outputs, fused memory, decoder caches and logits
        let outer = m * c * d + memory + decoder_cache;
        outer + b.decoder_block.max(b.chunk_stack + b.encoder_block)
    } else {
        let outer = b.chunk_stack + memory + decoder_cache;
        outer + b.decoder_block.max(b.encoder_block)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 32,
            vocab_size: 20,
            chunk_size: 8,
            max_chunks: 8,
            max_target_len: 12,
            dropout: 0.0,
        }
    }

    #[test]
    fn pass_counts_by_plan() {
        let p = recompute_passes(&CheckpointPlan::two_level(&cfg(), 3));
        assert!(p.iter().filter(|(k, _)| k.starts_with("enc")).all(|(_, &v)| v == 3));
        assert!(p.iter().filter(|(k, _)| k.starts_with("dec")).all(|(_, &v)| v == 2));
        assert!(recompute_passes(&CheckpointPlan::none(&cfg(), 3))
            .values()
            .all(|&v| v == 1));
        assert_eq!(recompute_passes(&CheckpointPlan::per_block(&cfg(), 2))["enc[1].0"], 2);
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let c = cfg();
        assert!(CheckpointPlan::two_level(&c, 3).policy(&c, 4).is_err());
        let mut p = CheckpointPlan::two_level(&c, 3);
        p.encoder_boundaries.push((0, 0));
        assert!(matches!(p.policy(&c, 3), Err(Error::PlanMismatch(_))));
        let mut p = CheckpointPlan::two_level(&c, 3);
        p.encoder_boundaries.retain(|&b| b != (1, 1));
        assert!(p.policy(&c, 3).is_err());
        let mut p = CheckpointPlan::two_level(&c, 3);
        p.decoder_boundaries.push(5);
        assert!(p.policy(&c, 3).is_err());
        let mut other = c.clone();
        other.n_dec_layers = 3;
        assert!(CheckpointPlan::two_level(&c, 3).policy(&other, 3).is_err());
    }

    #[test]
    fn cached_set_lists_chunk_outputs_and_decoder_inputs() {
        let p = CheckpointPlan::two_level(&cfg(), 2);
        assert_eq!(p.cached_set(), ["enc_out[0]", "enc_out[1]", "dec_in[0]", "dec_in[1]"]);
    }

    #[test]
    fn peak_model_is_monotone_and_convex_in_m() {
        let c = cfg();
        let p: Vec<usize> = (2..10).map(|m| peak_activation_model(&c, m, 6)).collect();
        for w in p.windows(3) {
            assert!(w[1] > w[0]);
            assert!(w[2] - w[1] >= w[1] - w[0]);
        }
    }

    fn batch(c: &ModelConfig, m: usize) -> ChunkBatch {
        let toks: Vec<u32> = (0..c.chunk_size * m - 3).map(|i| 3 + (i as u32 * 7) % 17).collect();
        crate::fusion::chunk_document(&toks, c.chunk_size, m).unwrap()
    }

    #[test]
    fn two_level_matches_direct_and_the_peak_model() {
        for dropout in [0.0, 0.1] {
            let c = ModelConfig { dropout, ..cfg() };
            let model = Model::new(c.clone(), 3).unwrap();
            let drop = (dropout > 0.0).then_some(Dropout { p: dropout, seed: 9 });
            for m in [1, 2, 4] {
                let b = batch(&c, m);
                let target = [4, 5, 6, 7, 8];
                let direct = train_step_direct(&model, &b, &target, drop).unwrap();
                let plan = CheckpointPlan::two_level(&c, m);
                let ck = train_step_checkpointed(&model, &b, &target, &plan, drop).unwrap();
                assert_eq!(direct.loss.to_bits(), ck.loss.to_bits());
                assert!(direct.grads.max_abs_diff(&ck.grads) <= 1e-5);
                assert_eq!(ck.trace.passes, recompute_passes(&plan));
                assert_eq!(
                    ck.trace.peak_interior,
                    peak_activation_model(&c, m, target.len() + 1),
                    "m={m} p={dropout}"
                );
                assert!(ck.trace.peak_interior < direct.trace.peak_interior);
            }
        }
    }
}
