use doc2dict::fusion::{chunk_document, ChunkBatch};
use doc2dict::model::{
    beam_search, encode_chunk, forward_loss, greedy, teacher_forcing_pair, DecoderScorer, EncodedMemory, Model,
    ModelConfig, SegmentPolicy, StepScorer,
};
use doc2dict::tensor::Graph;
use doc2dict::tokenizer::{BOS, EOS, PAD};
use proptest::prelude::*;

fn cfg() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 2,
        n_dec_layers: 2,
        d_ff: 24,
        vocab_size: 23,
        chunk_size: 6,
        max_chunks: 4,
        max_target_len: 10,
        dropout: 0.0,
    }
}

fn doc(len: usize, salt: u32) -> Vec<u32> {
    (0..len as u32).map(|i| 3 + (i * 5 + salt) % 20).collect()
}

fn encode(model: &Model, batch: &ChunkBatch, i: usize) -> Vec<f32> {
    let mut g = Graph::inference(&model.params);
    let blocks = vec![false; model.config.n_enc_layers];
    let e = encode_chunk(&mut g, model, i, &batch.chunks[i], &batch.pad_mask[i], &blocks, None).unwrap();
    assert_eq!(g.shape(e), [model.config.chunk_size, model.config.d_model]);
    g.value(e).data().to_vec()
}

fn teacher_logits(model: &Model, batch: &ChunkBatch, target: &[u32]) -> (f32, Vec<f32>) {
    let (dec_in, dec_out) = teacher_forcing_pair(target);
    let c = &model.config;
    let mut g = Graph::inference(&model.params);
    let out = forward_loss(
        &mut g,
        model,
        batch,
        &dec_in,
        &dec_out,
        &SegmentPolicy::none(batch.m, c.n_enc_layers, c.n_dec_layers),
        None,
    )
    .unwrap();
    (g.value(out.loss).item(), g.value(out.logits).data().to_vec())
}

fn log_softmax(row: &[f32]) -> Vec<f32> {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f32>().ln() + max;
    row.iter().map(|x| x - lse).collect()
}

#[test]
fn padding_chunk_encodes_to_zeros_and_chunks_are_independent() {
    let model = Model::new(cfg(), 5).unwrap();
    let batch = chunk_document(&doc(14, 1), 6, 4).unwrap();
    assert_eq!(batch.m, 3);
    // last chunk has two real tokens, rows beyond are zero
    let last = encode(&model, &batch, 2);
    assert!(last[2 * 16..].iter().all(|&v| v == 0.0));
    assert!(last[..2 * 16].iter().any(|&v| v != 0.0));

    // chunk 0 does not depend on chunk 1's content
    let other = {
        let mut t = doc(14, 1);
        for v in &mut t[6..] {
            *v = 3 + (*v + 7) % 20;
        }
        chunk_document(&t, 6, 4).unwrap()
    };
    assert_eq!(encode(&model, &batch, 0), encode(&model, &other, 0));
    assert_ne!(encode(&model, &batch, 1), encode(&model, &other, 1));

    // an all-pad chunk
    let pads = ChunkBatch {
        chunks: vec![vec![PAD; 6]],
        pad_mask: vec![vec![false; 6]],
        m: 1,
        c: 6,
        truncated: false,
    };
    assert!(encode(&model, &pads, 0).iter().all(|&v| v == 0.0));
}

#[test]
fn incremental_decoder_matches_teacher_forcing() {
    let model = Model::new(cfg(), 9).unwrap();
    let batch = chunk_document(&doc(17, 2), 6, 4).unwrap();
    let target = [4, 9, 9, 13, 5, 7];
    let (_, logits) = teacher_logits(&model, &batch, &target);
    let memory = EncodedMemory::encode(&model, &batch).unwrap();
    let scorer = DecoderScorer::new(&model, &memory).unwrap();
    let mut st = scorer.start();
    let v = model.config.vocab_size;
    let inputs: Vec<u32> = std::iter::once(BOS).chain(target.iter().copied()).collect();
    for (t, &tok) in inputs.iter().enumerate() {
        let lp = scorer.step(&mut st, tok).unwrap();
        let want = log_softmax(&logits[t * v..(t + 1) * v]);
        let diff = lp.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-4, "position {t}: {diff}");
    }
}

#[test]
fn decoder_is_causal() {
    let model = Model::new(cfg(), 4).unwrap();
    let batch = chunk_document(&doc(10, 0), 6, 4).unwrap();
    let a = [4, 5, 6, 7, 8];
    let b = [4, 5, 6, 19, 20];
    let (_, la) = teacher_logits(&model, &batch, &a);
    let (_, lb) = teacher_logits(&model, &batch, &b);
    let v = model.config.vocab_size;
    // decoder inputs agree through position 3 (bos + 3 tokens)
    assert_eq!(la[..4 * v], lb[..4 * v]);
    assert_ne!(la[4 * v..5 * v], lb[4 * v..5 * v]);
}

#[test]
fn every_parameter_receives_gradient() {
    let model = Model::new(cfg(), 2).unwrap();
    let batch = chunk_document(&doc(20, 3), 6, 4).unwrap();
    let (dec_in, dec_out) = teacher_forcing_pair(&[4, 5, 6]);
    let c = &model.config;
    let mut g = Graph::new(&model.params);
    let out = forward_loss(
        &mut g,
        &model,
        &batch,
        &dec_in,
        &dec_out,
        &SegmentPolicy::none(batch.m, c.n_enc_layers, c.n_dec_layers),
        None,
    )
    .unwrap();
    let grads = g.backward(out.loss).unwrap();
    for (id, name, _) in model.params.iter() {
        let gr = grads.param(id).unwrap_or_else(|| panic!("no gradient for {name}"));
        // rows of position tables past the sequence legitimately get none
        if name == "dec.pos" || name == "enc.chunk" {
            continue;
        }
        assert!(gr.data().iter().any(|&x| x != 0.0), "{name}");
    }
}

#[test]
fn loss_depends_on_later_chunks() {
    let model = Model::new(cfg(), 6).unwrap();
    let full = chunk_document(&doc(22, 4), 6, 4).unwrap();
    let (l_full, _) = teacher_logits(&model, &full, &[4, 5]);
    let (l_head, _) = teacher_logits(&model, &full.head(1), &[4, 5]);
    assert_ne!(l_full, l_head);
}

#[test]
fn beam_one_is_greedy_and_wider_beams_never_score_worse() {
    let mut wins = 0;
    let mut total = 0.0;
    for seed in 0..200 {
        let model = Model::new(ModelConfig { vocab_size: 8, ..cfg() }, seed).unwrap();
        let batch = chunk_document(&[3, 4, 5, 6, 7, 3, 4], 6, 4).unwrap();
        let memory = EncodedMemory::encode(&model, &batch).unwrap();
        let scorer = DecoderScorer::new(&model, &memory).unwrap();
        let g = greedy(&scorer, 6).unwrap();
        assert_eq!(beam_search(&scorer, 1, 6).unwrap(), g);
        let b = beam_search(&scorer, 4, 6).unwrap();
        if b.score >= g.score - 1e-6 {
            wins += 1;
        }
        total += b.score - g.score;
        assert!(b.tokens.len() <= 6);
        assert!(b.truncated || b.tokens.last() == Some(&EOS));
    }
    assert_eq!(wins, 200, "beam matched or beat greedy on {wins} of 200");
    assert!(total >= 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permuting_chunks_with_their_features_keeps_the_loss(seed in 0u64..1000, rot in 1usize..3) {
        // chunk identity features travel with the chunk: rotate both the
        // chunk order and the rows of the chunk-index table
        let model = Model::new(cfg(), seed).unwrap();
        let batch = chunk_document(&doc(18, seed as u32), 6, 4).unwrap();
        prop_assert_eq!(batch.m, 3);
        let perm: Vec<usize> = (0..3).map(|i| (i + rot) % 3).collect();
        let mut permuted = batch.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted.chunks[dst] = batch.chunks[src].clone();
            permuted.pad_mask[dst] = batch.pad_mask[src].clone();
        }
        let mut params = model.params.clone();
        let id = params.id("enc.chunk").unwrap();
        let table = params.get(id).clone();
        let d = model.config.d_model;
        let mut data = table.data().to_vec();
        for (dst, &src) in perm.iter().enumerate() {
            data[dst * d..(dst + 1) * d].copy_from_slice(&table.data()[src * d..(src + 1) * d]);
        }
        params.replace(id, doc2dict::tensor::Tensor::new(table.shape().to_vec(), data).unwrap());
        let moved = Model::from_params(model.config.clone(), params).unwrap();
        let (a, _) = teacher_logits(&model, &batch, &[4, 8, 12]);
        let (b, _) = teacher_logits(&moved, &permuted, &[4, 8, 12]);
        prop_assert!((a - b).abs() <= 1e-5, "{} vs {}", a, b);
    }
}
