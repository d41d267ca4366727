//! Fixed-width chunking, fusion of per-chunk encodings into one decoder
//! memory, and exact attention cost accounting.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Graph, NodeId};
use crate::tokenizer::PAD;

/// `m` right-padded windows of `c` token ids. `pad_mask[i][j]` is true for
/// real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkBatch {
    pub chunks: Vec<Vec<u32>>,
    pub pad_mask: Vec<Vec<bool>>,
    pub m: usize,
    pub c: usize,
    /// Tokens beyond `c * m_max` were dropped.
    pub truncated: bool,
}

/// Split `tokens` into `ceil(len / c)` windows (at least one), keeping the
/// head when more than `m_max` windows would be needed.
pub fn chunk_document(tokens: &[u32], c: usize, m_max: usize) -> Result<ChunkBatch> {
    if c == 0 || m_max == 0 {
        return Err(Error::Invalid("chunk size and chunk limit must be positive".into()));
    }
    let needed = tokens.len().div_ceil(c).max(1);
    let m = needed.min(m_max);
    let kept = &tokens[..tokens.len().min(m * c)];
    let mut chunks = Vec::with_capacity(m);
    let mut pad_mask = Vec::with_capacity(m);
    for i in 0..m {
        let part = kept.get(i * c..kept.len().min((i + 1) * c)).unwrap_or(&[]);
        let mut ids = part.to_vec();
        let mut valid = vec![true; part.len()];
        ids.resize(c, PAD);
        valid.resize(c, false);
        chunks.push(ids);
        pad_mask.push(valid);
    }
    Ok(ChunkBatch {
        chunks,
        pad_mask,
        m,
        c,
        truncated: needed > m_max,
    })
}

impl ChunkBatch {
    /// Number of real (non-pad) tokens.
    pub fn len(&self) -> usize {
        self.pad_mask.iter().flatten().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keep only the first `m` chunks.
    pub fn head(&self, m: usize) -> ChunkBatch {
        let m = m.clamp(1, self.m);
        ChunkBatch {
            chunks: self.chunks[..m].to_vec(),
            pad_mask: self.pad_mask[..m].to_vec(),
            m,
            c: self.c,
            truncated: self.truncated || m < self.m,
        }
    }
}

/// Concatenation of the unpadded chunks.
pub fn unchunk(batch: &ChunkBatch) -> Vec<u32> {
    batch
        .chunks
        .iter()
        .zip(&batch.pad_mask)
        .flat_map(|(ids, valid)| ids.iter().zip(valid).filter(|(_, &v)| v).map(|(&t, _)| t))
        .collect()
}

/// Stack per-chunk encodings (each `c x d`) in order into an `(m*c) x d`
/// memory, returning the key-validity mask for cross-attention.
pub fn fuse_encodings(g: &mut Graph, encodings: &[NodeId], pad_mask: &[Vec<bool>]) -> Result<(NodeId, Vec<bool>)> {
    let Some(&first) = encodings.first() else {
        return Err(Error::Invalid("no chunk encodings to fuse".into()));
    };
    if encodings.len() != pad_mask.len() {
        return Err(Error::Invalid(format!(
            "{} encodings but {} pad masks",
            encodings.len(),
            pad_mask.len()
        )));
    }
    let shape = g.shape(first).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "fuse_encodings",
            lhs: shape,
            rhs: vec![],
        });
    }
    for (&e, mask) in encodings.iter().zip(pad_mask) {
        if g.shape(e) != shape.as_slice() || mask.len() != shape[0] {
            return Err(Error::Shape {
                op: "fuse_encodings",
                lhs: shape,
                rhs: g.shape(e).to_vec(),
            });
        }
    }
    let memory = g.concat(encodings, 0)?;
    Ok((memory, pad_mask.concat()))
}

/// Attention-score entry and FLOP counts for chunked versus dense encoder
/// self-attention over `m * c` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub c: usize,
    pub m: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub encoder_attn_entries: u64,
    pub dense_attn_entries: u64,
    pub ratio: f64,
    pub encoder_flops: u64,
    pub dense_flops: u64,
}

/// Closed-form costs. Entries count score-matrix elements over all layers
/// and heads; FLOPs count the two attention products (QK^T and PV), two
/// operations per multiply-add.
pub fn attention_cost(config: &ModelConfig, m: usize) -> Result<CostReport> {
    if m == 0 {
        return Err(Error::Invalid("chunk count must be at least 1".into()));
    }
    let (c, l, h, dh) = (
        config.chunk_size as u64,
        config.n_enc_layers as u64,
        config.n_heads as u64,
        config.d_head() as u64,
    );
    let mu = m as u64;
    let enc = l * h * mu * c * c;
    let dense = l * h * (mu * c) * (mu * c);
    Ok(CostReport {
        c: config.chunk_size,
        m,
        n_layers: config.n_enc_layers,
        n_heads: config.n_heads,
        d_head: config.d_head(),
        encoder_attn_entries: enc,
        dense_attn_entries: dense,
        ratio: dense as f64 / enc as f64,
        encoder_flops: 4 * dh * enc,
        dense_flops: 4 * dh * dense,
    })
}

impl CostReport {
    pub fn per_head_layer_encoder(&self) -> u64 {
        self.encoder_attn_entries / (self.n_layers * self.n_heads) as u64
    }

    pub fn per_head_layer_dense(&self) -> u64 {
        self.dense_attn_entries / (self.n_layers * self.n_heads) as u64
    }

    /// Flat `key=value` lines.
    pub fn to_kv_text(&self) -> String {
        format!(
            "c={}\nm={}\nn_layers={}\nn_heads={}\nd_head={}\nencoder_attn_entries={}\ndense_attn_entries={}\n\
             per_head_layer_encoder={}\nper_head_layer_dense={}\nratio={}\nencoder_flops={}\ndense_flops={}\n",
            self.c,
            self.m,
            self.n_layers,
            self.n_heads,
            self.d_head,
            self.encoder_attn_entries,
            self.dense_attn_entries,
            self.per_head_layer_encoder(),
            self.per_head_layer_dense(),
            self.ratio,
            self.encoder_flops,
            self.dense_flops
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(c: usize) -> ModelConfig {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            vocab_size: 300,
            chunk_size: c,
            max_chunks: 64,
            max_target_len: 64,
            dropout: 0.0,
        }
    }

    #[test]
    fn chunk_arithmetic() {
        let toks: Vec<u32> = (0..1025).map(|i| 3 + i % 50).collect();
        let b = chunk_document(&toks, 512, 64).unwrap();
        assert_eq!(b.m, 3);
        assert_eq!(b.pad_mask[2].iter().filter(|&&v| !v).count(), 511);
        assert!(!b.truncated);

        let e = chunk_document(&[], 512, 64).unwrap();
        assert_eq!(e.m, 1);
        assert!(e.pad_mask[0].iter().all(|&v| !v));

        let long: Vec<u32> = vec![7; 40_000];
        let t = chunk_document(&long, 512, 64).unwrap();
        assert_eq!((t.m, t.truncated, t.len()), (64, true, 32_768));
        assert!(chunk_document(&toks, 0, 4).is_err());
    }

    #[test]
    fn full_budget_cost() {
        let r = attention_cost(&cfg(512), 64).unwrap();
        assert_eq!(r.per_head_layer_encoder(), 16_777_216);
        assert_eq!(r.per_head_layer_dense(), 1_073_741_824);
        assert_eq!(r.ratio, 64.0);
        assert_eq!(attention_cost(&cfg(512), 1).unwrap().ratio, 1.0);
        assert!(attention_cost(&cfg(512), 0).is_err());
        let text = r.to_kv_text();
        assert!(text.contains("ratio=64\n"), "{text}");
    }

    proptest! {
        #[test]
        fn unchunk_inverts_chunking(toks in proptest::collection::vec(3u32..100, 0..200), c in 1usize..40) {
            let b = chunk_document(&toks, c, usize::MAX).unwrap();
            prop_assert!(!b.truncated);
            prop_assert_eq!(b.m, toks.len().div_ceil(c).max(1));
            prop_assert!(b.chunks.iter().all(|ch| ch.len() == c));
            prop_assert_eq!(unchunk(&b), toks);
        }

        #[test]
        fn truncation_keeps_the_head(toks in proptest::collection::vec(3u32..100, 0..200), c in 1usize..10, m_max in 1usize..6) {
            let b = chunk_document(&toks, c, m_max).unwrap();
            let kept = unchunk(&b);
            prop_assert_eq!(&toks[..kept.len()], kept.as_slice());
            prop_assert_eq!(b.truncated, toks.len() > c * m_max);
        }

        #[test]
        fn cost_is_linear_in_chunks(m in 1usize..200, c in 1usize..600) {
            let a = attention_cost(&cfg(c), m).unwrap();
            let b = attention_cost(&cfg(c), 2 * m).unwrap();
            prop_assert_eq!(b.encoder_attn_entries, 2 * a.encoder_attn_entries);
            prop_assert_eq!(a.ratio, m as f64);
        }
    }
}
