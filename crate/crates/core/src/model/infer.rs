//! Gradient-free inference: encoder through an inference graph, decoder as
//! an incremental step function with self-attention caches and
//! cross-attention keys/values computed once.

use super::generate::StepScorer;
use super::{Attn, Model, Norm, LN_EPS};
use crate::error::{Error, Result};
use crate::fusion::{fuse_encodings, ChunkBatch};
use crate::tensor::kernels::{gelu, gemm, layer_norm_rows, log_softmax};
use crate::tensor::{Graph, ParamId};

/// Fused encoder output for one document.
#[derive(Clone, Debug)]
pub struct EncodedMemory {
    pub data: Vec<f32>,
    pub valid: Vec<bool>,
    pub rows: usize,
}

impl EncodedMemory {
    pub fn encode(model: &Model, batch: &ChunkBatch) -> Result<Self> {
        let mut g = Graph::inference(&model.params);
        let no_segments = vec![false; model.config.n_enc_layers];
        let mut encs = Vec::with_capacity(batch.m);
        for i in 0..batch.m {
            encs.push(super::encode_chunk(
                &mut g,
                model,
                i,
                &batch.chunks[i],
                &batch.pad_mask[i],
                &no_segments,
                None,
            )?);
        }
        let (mem, valid) = fuse_encodings(&mut g, &encs, &batch.pad_mask)?;
        Ok(EncodedMemory {
            data: g.value(mem).data().to_vec(),
            rows: valid.len(),
            valid,
        })
    }
}

fn vec_mat(x: &[f32], w: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0; n];
    gemm(1, x.len(), n, x, false, w, false, &mut out, false);
    out
}

/// Rows-by-matrix product: `x` is `rows x k`, `w` is `k x n`.
fn mat_mat(x: &[f32], rows: usize, w: &[f32], n: usize) -> Vec<f32> {
    let k = x.len() / rows;
    let mut out = vec![0.0; rows * n];
    gemm(rows, k, n, x, false, w, false, &mut out, false);
    out
}

struct LayerCross {
    k: Vec<f32>,
    v: Vec<f32>,
}

/// Decoder step function over a fixed memory.
pub struct DecoderScorer<'m> {
    model: &'m Model,
    cross: Vec<LayerCross>,
    mem_valid: Vec<bool>,
    mem_rows: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    pos: usize,
    self_k: Vec<Vec<f32>>,
    self_v: Vec<Vec<f32>>,
}

impl<'m> DecoderScorer<'m> {
    pub fn new(model: &'m Model, memory: &EncodedMemory) -> Result<Self> {
        let d = model.config.d_model;
        if memory.rows == 0 || memory.data.len() != memory.rows * d {
            return Err(Error::Invalid("memory does not match d_model".into()));
        }
        let cross = model
            .layout
            .dec
            .iter()
            .map(|l| LayerCross {
                k: mat_mat(&memory.data, memory.rows, model.params.get(l.cross.wk).data(), d),
                v: mat_mat(&memory.data, memory.rows, model.params.get(l.cross.wv).data(), d),
            })
            .collect();
        Ok(DecoderScorer {
            model,
            cross,
            mem_valid: memory.valid.clone(),
            mem_rows: memory.rows,
        })
    }

    fn w(&self, id: ParamId) -> &[f32] {
        self.model.params.get(id).data()
    }

    fn norm(&self, x: &[f32], n: Norm) -> Vec<f32> {
        let mut out = vec![0.0; x.len()];
        layer_norm_rows(x, x.len(), self.w(n.g), self.w(n.b), LN_EPS, &mut out);
        out
    }

    /// One query row attending over `rows` cached keys/values.
    fn attend(&self, q: &[f32], k: &[f32], v: &[f32], rows: usize, valid: Option<&[bool]>, a: Attn) -> Vec<f32> {
        let d = self.model.config.d_model;
        let heads = self.model.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut ctx = vec![0.0; d];
        let mut p = vec![0.0f32; rows];
        for h in 0..heads {
            let qh = &q[h * dh..(h + 1) * dh];
            let mut max = f32::NEG_INFINITY;
            for (j, pj) in p.iter_mut().enumerate() {
                if valid.is_some_and(|v| !v[j]) {
                    continue;
                }
                let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
                *pj = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                max = max.max(*pj);
            }
            if max == f32::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for (j, pj) in p.iter_mut().enumerate() {
                if valid.is_some_and(|v| !v[j]) {
                    *pj = 0.0;
                } else {
                    *pj = (*pj - max).exp();
                    sum += *pj;
                }
            }
            let out = &mut ctx[h * dh..(h + 1) * dh];
            for (j, &pj) in p.iter().enumerate() {
                if pj == 0.0 {
                    continue;
                }
                let w = pj / sum;
                let vj = &v[j * d + h * dh..j * d + (h + 1) * dh];
                for (o, &x) in out.iter_mut().zip(vj) {
                    *o += w * x;
                }
            }
        }
        vec_mat(&ctx, self.w(a.wo), d)
    }
}

impl StepScorer for DecoderScorer<'_> {
    type State = DecoderState;

    fn start(&self) -> DecoderState {
        let n = self.model.config.n_dec_layers;
        DecoderState {
            pos: 0,
            self_k: vec![Vec::new(); n],
            self_v: vec![Vec::new(); n],
        }
    }

    fn max_len(&self) -> usize {
        self.model.config.max_target_len
    }

    fn step(&self, st: &mut DecoderState, token: u32) -> Result<Vec<f32>> {
        let cfg = &self.model.config;
        let d = cfg.d_model;
        if st.pos >= cfg.max_target_len {
            return Err(Error::Invalid("decoder position exceeds max_target_len".into()));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::Invalid(format!("token {token} outside vocabulary")));
        }
        let lay = &self.model.layout;
        let t = token as usize;
        let emb = self.w(lay.embed);
        let pos = self.w(lay.dec_pos);
        let mut x: Vec<f32> = (0..d).map(|i| emb[t * d + i] + pos[st.pos * d + i]).collect();
        for (l, p) in lay.dec.iter().enumerate() {
            let h = self.norm(&x, p.ln1);
            let q = vec_mat(&h, self.w(p.self_attn.wq), d);
            st.self_k[l].extend(vec_mat(&h, self.w(p.self_attn.wk), d));
            st.self_v[l].extend(vec_mat(&h, self.w(p.self_attn.wv), d));
            let a = self.attend(&q, &st.self_k[l], &st.self_v[l], st.pos + 1, None, p.self_attn);
            x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);

            let h = self.norm(&x, p.ln2);
            let q = vec_mat(&h, self.w(p.cross.wq), d);
            let c = &self.cross[l];
            let a = self.attend(&q, &c.k, &c.v, self.mem_rows, Some(&self.mem_valid), p.cross);
            x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);

            let h = self.norm(&x, p.ln3);
            let f: Vec<f32> = vec_mat(&h, self.w(p.ffn.w1), cfg.d_ff).into_iter().map(gelu).collect();
            let f = vec_mat(&f, self.w(p.ffn.w2), d);
            x.iter_mut().zip(&f).for_each(|(x, f)| *x += f);
        }
        let h = self.norm(&x, lay.dec_ln);
        let mut logits = vec![0.0; cfg.vocab_size];
        gemm(1, d, cfg.vocab_size, &h, false, emb, true, &mut logits, false);
        st.pos += 1;
        Ok(log_softmax(&logits))
    }
}
