use doc2dict::checkpoint::{
    peak_activation_model, recompute_passes, train_step_checkpointed, train_step_direct, CheckpointPlan,
};
use doc2dict::fusion::chunk_document;
use doc2dict::model::{Dropout, Model, ModelConfig};
use proptest::prelude::*;

fn cfg(d: usize, c: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_heads: 2,
        n_enc_layers: layers,
        n_dec_layers: layers,
        d_ff: 2 * d,
        vocab_size: 30,
        chunk_size: c,
        max_chunks: 16,
        max_target_len: 12,
        dropout: 0.0,
    }
}

fn tokens(n: usize, seed: u64) -> Vec<u32> {
    (0..n as u64).map(|i| 3 + ((i * 31 + seed * 7) % 27) as u32).collect()
}

#[test]
fn plans_agree_on_loss_and_gradients() {
    let c = cfg(16, 8, 2);
    let model = Model::new(c.clone(), 1).unwrap();
    let batch = chunk_document(&tokens(29, 1), 8, 16).unwrap();
    let target = [5, 6, 7, 8];
    let direct = train_step_direct(&model, &batch, &target, None).unwrap();
    for plan in [
        CheckpointPlan::per_block(&c, batch.m),
        CheckpointPlan::two_level(&c, batch.m),
    ] {
        let out = train_step_checkpointed(&model, &batch, &target, &plan, None).unwrap();
        assert_eq!(out.loss.to_bits(), direct.loss.to_bits());
        assert!(out.grads.max_abs_diff(&direct.grads) <= 1e-5);
        assert_eq!(out.trace.passes, recompute_passes(&plan));
        assert!(out.trace.peak_interior < direct.trace.peak_interior);
        let extra: usize = out.trace.passes.values().sum();
        let base: usize = direct.trace.passes.values().sum();
        assert!(extra > base);
    }
}

#[test]
fn two_level_pass_counts() {
    let c = cfg(8, 4, 3);
    let model = Model::new(c.clone(), 2).unwrap();
    let batch = chunk_document(&tokens(15, 2), 4, 16).unwrap();
    let plan = CheckpointPlan::two_level(&c, batch.m);
    let out = train_step_checkpointed(&model, &batch, &[4, 5], &plan, None).unwrap();
    for (label, n) in &out.trace.passes {
        let want = if label.starts_with("enc") { 3 } else { 2 };
        assert_eq!(*n, want, "{label}");
    }
    let none = train_step_direct(&model, &batch, &[4, 5], None).unwrap();
    assert!(none.trace.passes.values().all(|&n| n == 1));
}

#[test]
fn single_chunk_two_level_is_per_block() {
    let c = cfg(8, 6, 2);
    let model = Model::new(c.clone(), 3).unwrap();
    let batch = chunk_document(&tokens(5, 3), 6, 16).unwrap();
    assert_eq!(batch.m, 1);
    let a = train_step_checkpointed(&model, &batch, &[4], &CheckpointPlan::two_level(&c, 1), None).unwrap();
    let b = train_step_checkpointed(&model, &batch, &[4], &CheckpointPlan::per_block(&c, 1), None).unwrap();
    assert_eq!(a.trace.peak_interior, b.trace.peak_interior);
    assert_eq!(a.trace.passes, b.trace.passes);
}

#[test]
fn mismatched_plan_is_an_error() {
    let c = cfg(8, 4, 2);
    let model = Model::new(c.clone(), 3).unwrap();
    let batch = chunk_document(&tokens(10, 3), 4, 16).unwrap();
    let plan = CheckpointPlan::two_level(&c, batch.m + 1);
    assert!(train_step_checkpointed(&model, &batch, &[4], &plan, None).is_err());
}

#[test]
fn measured_peak_matches_the_closed_form_across_chunk_counts() {
    let c = cfg(16, 8, 2);
    let model = Model::new(c.clone(), 4).unwrap();
    let target = [4, 5, 6, 7, 8, 9];
    let mut measured = Vec::new();
    for m in [1, 2, 4, 8] {
        let batch = chunk_document(&tokens(8 * m, m as u64), 8, 16).unwrap();
        let out = train_step_checkpointed(&model, &batch, &target, &CheckpointPlan::two_level(&c, m), None).unwrap();
        assert_eq!(
            out.trace.peak_interior,
            peak_activation_model(&c, m, target.len() + 1),
            "m={m}"
        );
        measured.push(out.trace.peak_interior);
    }
    assert!(measured.windows(2).all(|w| w[1] > w[0]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gradient_equivalence_random(seed in 0u64..10_000, m in 1usize..5, t in 1usize..8, drop in any::<bool>()) {
        let mut c = cfg(16, 6, 2);
        if drop {
            c.dropout = 0.1;
        }
        let model = Model::new(c.clone(), seed).unwrap();
        let batch = chunk_document(&tokens(6 * m - 1, seed), 6, 16).unwrap();
        let target: Vec<u32> = (0..t as u32).map(|i| 3 + (i * 5 + seed as u32) % 27).collect();
        let d = drop.then_some(Dropout { p: 0.1, seed });
        let direct = train_step_direct(&model, &batch, &target, d).unwrap();
        let ck = train_step_checkpointed(&model, &batch, &target, &CheckpointPlan::two_level(&c, batch.m), d).unwrap();
        prop_assert_eq!(direct.loss.to_bits(), ck.loss.to_bits());
        prop_assert!(direct.grads.max_abs_diff(&ck.grads) <= 1e-5);
        prop_assert_eq!(ck.trace.peak_interior, peak_activation_model(&c, batch.m, t + 1));
    }
}
