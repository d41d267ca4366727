//! Graph-building forward pass with optional checkpoint segments.

use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Attn, Model, Norm, LN_EPS};
use crate::error::{Error, Result};
use crate::fusion::{fuse_encodings, ChunkBatch};
use crate::tensor::{AttnMask, Graph, NodeId, ParamId, Replay, Tensor};
use crate::tokenizer::{BOS, EOS, PAD};

/// Inverted dropout whose masks are a pure function of `(seed, site)`, so a
/// replayed segment draws the same mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub p: f32,
    pub seed: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn site(kind: u64, chunk: usize, layer: usize, slot: u64) -> u64 {
    splitmix(kind ^ splitmix((chunk as u64) << 20 ^ (layer as u64) << 4 ^ slot))
}

fn dropout(g: &mut Graph, x: NodeId, drop: Option<Dropout>, site: u64) -> Result<NodeId> {
    let Some(d) = drop.filter(|d| d.p > 0.0) else {
        return Ok(x);
    };
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - d.p);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(d.seed ^ site));
    let data = (0..n)
        .map(|_| if rng.gen::<f32>() < d.p { 0.0 } else { keep })
        .collect();
    let mask = g.constant(Tensor::from_parts(shape, data));
    g.mul(x, mask)
}

/// Which parts of the forward pass run as checkpoint segments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentPolicy {
    /// Wrap each chunk's whole encoder stack in a segment.
    pub chunk_outer: Vec<bool>,
    /// `[chunk][layer]`: wrap that encoder block in a segment.
    pub enc_blocks: Vec<Vec<bool>>,
    /// `[layer]`: wrap that decoder block in a segment.
    pub dec_blocks: Vec<bool>,
}

impl SegmentPolicy {
    pub fn uniform(m: usize, n_enc: usize, n_dec: usize, outer: bool, enc: bool, dec: bool) -> Self {
        SegmentPolicy {
            chunk_outer: vec![outer; m],
            enc_blocks: vec![vec![enc; n_enc]; m],
            dec_blocks: vec![dec; n_dec],
        }
    }

    pub fn none(m: usize, n_enc: usize, n_dec: usize) -> Self {
        Self::uniform(m, n_enc, n_dec, false, false, false)
    }
}

fn linear(g: &mut Graph, x: NodeId, w: ParamId) -> Result<NodeId> {
    let w = g.param(w);
    g.matmul(x, w)
}

fn norm(g: &mut Graph, x: NodeId, n: Norm) -> Result<NodeId> {
    let gain = g.param(n.g);
    let bias = g.param(n.b);
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Multi-head attention of `q_in` rows over `kv_in` rows.
#[allow(clippy::too_many_arguments)]
fn attention(
    g: &mut Graph,
    heads: usize,
    q_in: NodeId,
    kv_in: NodeId,
    a: Attn,
    mask: &Arc<AttnMask>,
    kind: &str,
) -> Result<NodeId> {
    let (n, d) = (g.shape(q_in)[0], g.shape(q_in)[1]);
    let k = g.shape(kv_in)[0];
    let dh = d / heads;
    let q = linear(g, q_in, a.wq)?;
    let q = g.reshape(q, &[n, heads, dh])?;
    let q = g.transpose(q, &[1, 0, 2])?;
    let kt = linear(g, kv_in, a.wk)?;
    let kt = g.reshape(kt, &[k, heads, dh])?;
    let kt = g.transpose(kt, &[1, 2, 0])?;
    let v = linear(g, kv_in, a.wv)?;
    let v = g.reshape(v, &[k, heads, dh])?;
    let v = g.transpose(v, &[1, 0, 2])?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / (dh as f32).sqrt())?;
    let p = g.masked_softmax(s, mask.clone())?;
    g.meter().count_attention(kind, (heads * n * k) as u64);
    let c = g.matmul(p, v)?;
    let c = g.transpose(c, &[1, 0, 2])?;
    let c = g.reshape(c, &[n, d])?;
    linear(g, c, a.wo)
}

fn ffn(g: &mut Graph, x: NodeId, w1: ParamId, w2: ParamId) -> Result<NodeId> {
    let h = linear(g, x, w1)?;
    let h = g.gelu(h)?;
    linear(g, h, w2)
}

const ENC: u64 = 1;
const DEC: u64 = 2;

fn enc_block(
    g: &mut Graph,
    model: &Model,
    chunk: usize,
    layer: usize,
    x: NodeId,
    mask: &Arc<AttnMask>,
    drop: Option<Dropout>,
) -> Result<NodeId> {
    g.meter().count_pass(&format!("enc[{chunk}].{layer}"));
    let p = &model.layout.enc[layer];
    let h = norm(g, x, p.ln1)?;
    let a = attention(g, model.config.n_heads, h, h, p.attn, mask, "enc_self")?;
    let a = dropout(g, a, drop, site(ENC, chunk, layer, 0))?;
    let x = g.add(x, a)?;
    let h = norm(g, x, p.ln2)?;
    let f = ffn(g, h, p.ffn.w1, p.ffn.w2)?;
    let f = dropout(g, f, drop, site(ENC, chunk, layer, 1))?;
    g.add(x, f)
}

#[allow(clippy::too_many_arguments)]
fn dec_block(
    g: &mut Graph,
    model: &Model,
    layer: usize,
    y: NodeId,
    memory: NodeId,
    self_mask: &Arc<AttnMask>,
    cross_mask: &Arc<AttnMask>,
    drop: Option<Dropout>,
) -> Result<NodeId> {
    g.meter().count_pass(&format!("dec.{layer}"));
    let p = &model.layout.dec[layer];
    let heads = model.config.n_heads;
    let h = norm(g, y, p.ln1)?;
    let a = attention(g, heads, h, h, p.self_attn, self_mask, "dec_self")?;
    let a = dropout(g, a, drop, site(DEC, 0, layer, 0))?;
    let y = g.add(y, a)?;
    let h = norm(g, y, p.ln2)?;
    let c = attention(g, heads, h, memory, p.cross, cross_mask, "dec_cross")?;
    let c = dropout(g, c, drop, site(DEC, 0, layer, 1))?;
    let y = g.add(y, c)?;
    let h = norm(g, y, p.ln3)?;
    let f = ffn(g, h, p.ffn.w1, p.ffn.w2)?;
    let f = dropout(g, f, drop, site(DEC, 0, layer, 2))?;
    g.add(y, f)
}

/// Encode one chunk (at most `chunk_size` tokens, right-padded internally)
/// into a `chunk_size x d_model` block. Self-attention stays inside the
/// chunk, padded keys are masked, padded rows of the result are zero, and
/// the learned embedding of chunk index `chunk` is added to every row.
#[allow(clippy::too_many_arguments)]
pub fn encode_chunk<'a>(
    g: &mut Graph<'a>,
    model: &'a Model,
    chunk: usize,
    ids: &[u32],
    valid: &[bool],
    block_segments: &[bool],
    drop: Option<Dropout>,
) -> Result<NodeId> {
    let cfg = &model.config;
    let c = cfg.chunk_size;
    if ids.len() > c {
        return Err(Error::Invalid(format!(
            "chunk of {} tokens exceeds chunk size {c}",
            ids.len()
        )));
    }
    if valid.len() != ids.len() {
        return Err(Error::Invalid("pad mask length differs from chunk length".into()));
    }
    if chunk >= cfg.max_chunks {
        return Err(Error::Invalid(format!(
            "chunk index {chunk} exceeds max_chunks {}",
            cfg.max_chunks
        )));
    }
    if block_segments.len() != cfg.n_enc_layers {
        return Err(Error::PlanMismatch(format!(
            "{} encoder block flags for {} layers",
            block_segments.len(),
            cfg.n_enc_layers
        )));
    }
    let mut padded = ids.to_vec();
    padded.resize(c, PAD);
    let mut valid = valid.to_vec();
    valid.resize(c, false);

    let lay = &model.layout;
    let emb = g.param(lay.embed);
    let x = g.embedding(emb, Arc::new(padded))?;
    let pos = g.param(lay.enc_pos);
    let mut x = g.add(x, pos)?;
    let mask = Arc::new(AttnMask::keys(c, &valid));
    for (layer, &ckpt) in block_segments.iter().enumerate() {
        let mask = mask.clone();
        let replay: Replay<'a> =
            Rc::new(move |g, ins| Ok(vec![enc_block(g, model, chunk, layer, ins[0], &mask, drop)?]));
        x = g.segment(&format!("enc[{chunk}].{layer}"), &[x], replay, ckpt)?[0];
    }
    let x = norm(g, x, lay.enc_ln)?;
    let table = g.param(lay.enc_chunk);
    let row = g.slice(table, 0, chunk, chunk + 1)?;
    let row = g.reshape(row, &[cfg.d_model])?;
    let x = g.add(x, row)?;
    let d = cfg.d_model;
    let rows: Vec<f32> = valid
        .iter()
        .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, d))
        .collect();
    let keep = g.constant(Tensor::from_parts(vec![c, d], rows));
    g.mul(x, keep)
}

/// Decoder input (`bos` + target) and output (target + `eos`) sequences.
pub fn teacher_forcing_pair(target: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut inp = Vec::with_capacity(target.len() + 1);
    inp.push(BOS);
    inp.extend_from_slice(target);
    let mut out = target.to_vec();
    out.push(EOS);
    (inp, out)
}

/// Teacher-forced decoder over `memory` (`rows x d_model`, rows with
/// `mem_valid == false` are masked from cross-attention). Returns the mean
/// non-pad cross-entropy and the logits.
#[allow(clippy::too_many_arguments)]
pub fn decode_teacher_forced<'a>(
    g: &mut Graph<'a>,
    model: &'a Model,
    memory: NodeId,
    mem_valid: &[bool],
    dec_in: &[u32],
    dec_out: &[u32],
    block_segments: &[bool],
    drop: Option<Dropout>,
) -> Result<(NodeId, NodeId)> {
    let cfg = &model.config;
    let t = dec_in.len();
    if mem_valid.is_empty() || g.shape(memory).len() != 2 || g.shape(memory)[0] != mem_valid.len() {
        return Err(Error::Invalid(
            "decoder memory is empty or does not match its mask".into(),
        ));
    }
    if g.shape(memory)[1] != cfg.d_model {
        return Err(Error::Invalid(format!(
            "memory width {} != d_model",
            g.shape(memory)[1]
        )));
    }
    if t == 0 || t != dec_out.len() {
        return Err(Error::Invalid(
            "decoder input and output must be nonempty and equally long".into(),
        ));
    }
    if t > cfg.max_target_len {
        return Err(Error::Invalid(format!(
            "target of {t} tokens exceeds max_target_len {}",
            cfg.max_target_len
        )));
    }
    if block_segments.len() != cfg.n_dec_layers {
        return Err(Error::PlanMismatch(format!(
            "{} decoder block flags for {} layers",
            block_segments.len(),
            cfg.n_dec_layers
        )));
    }
    let lay = &model.layout;
    let emb = g.param(lay.embed);
    let y = g.embedding(emb, Arc::new(dec_in.to_vec()))?;
    let pos = g.param(lay.dec_pos);
    let pos = g.slice(pos, 0, 0, t)?;
    let mut y = g.add(y, pos)?;
    let self_mask = Arc::new(AttnMask::causal(t));
    let cross_mask = Arc::new(AttnMask::keys(t, mem_valid));
    for (layer, &ckpt) in block_segments.iter().enumerate() {
        let (sm, cm) = (self_mask.clone(), cross_mask.clone());
        let replay: Replay<'a> =
            Rc::new(move |g, ins| Ok(vec![dec_block(g, model, layer, ins[0], ins[1], &sm, &cm, drop)?]));
        y = g.segment(&format!("dec.{layer}"), &[y, memory], replay, ckpt)?[0];
    }
    let y = norm(g, y, lay.dec_ln)?;
    let et = g.transpose(emb, &[1, 0])?;
    let logits = g.matmul(y, et)?;
    let loss = g.cross_entropy(logits, Arc::new(dec_out.to_vec()), PAD)?;
    Ok((loss, logits))
}

pub struct ForwardOut {
    pub loss: NodeId,
    pub logits: NodeId,
    pub memory: NodeId,
}

/// Full training forward pass: encode every chunk, fuse, decode.
#[allow(clippy::too_many_arguments)]
pub fn forward_loss<'a>(
    g: &mut Graph<'a>,
    model: &'a Model,
    batch: &ChunkBatch,
    dec_in: &[u32],
    dec_out: &[u32],
    policy: &SegmentPolicy,
    drop: Option<Dropout>,
) -> Result<ForwardOut> {
    let m = batch.m;
    if policy.chunk_outer.len() != m || policy.enc_blocks.len() != m {
        return Err(Error::PlanMismatch(format!(
            "policy covers {} chunks, batch has {m}",
            policy.chunk_outer.len()
        )));
    }
    if batch.c != model.config.chunk_size {
        return Err(Error::Invalid(format!(
            "batch chunk size {} != model chunk size {}",
            batch.c, model.config.chunk_size
        )));
    }
    let mut encs = Vec::with_capacity(m);
    for i in 0..m {
        let (ids, valid) = (batch.chunks[i].clone(), batch.pad_mask[i].clone());
        let blocks = policy.enc_blocks[i].clone();
        let out = if policy.chunk_outer[i] {
            let replay: Replay<'a> =
                Rc::new(move |g, _| Ok(vec![encode_chunk(g, model, i, &ids, &valid, &blocks, drop)?]));
            g.segment(&format!("enc[{i}]"), &[], replay, true)?[0]
        } else {
            encode_chunk(g, model, i, &ids, &valid, &blocks, drop)?
        };
        encs.push(out);
    }
    let (memory, mem_valid) = fuse_encodings(g, &encs, &batch.pad_mask)?;
    let (loss, logits) =
        decode_teacher_forced(g, model, memory, &mem_valid, dec_in, dec_out, &policy.dec_blocks, drop)?;
    Ok(ForwardOut { loss, logits, memory })
}
