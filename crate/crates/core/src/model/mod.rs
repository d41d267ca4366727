//! Encoder-decoder transformer: configuration, parameters, training forward
//! pass, incremental inference and search.

mod forward;
mod generate;
mod infer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub use forward::{
    decode_teacher_forced, encode_chunk, forward_loss, teacher_forcing_pair, Dropout, ForwardOut, SegmentPolicy,
};
pub use generate::{beam_search, greedy, search, Generation, SearchMode, StepScorer};
pub use infer::{DecoderScorer, DecoderState, EncodedMemory};

pub const LN_EPS: f32 = 1e-5;
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub chunk_size: usize,
    pub max_chunks: usize,
    pub max_target_len: usize,
    pub dropout: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return bad("need at least one encoder and one decoder layer");
        }
        if self.d_ff == 0 || self.vocab_size < 3 {
            return bad("d_ff must be positive and vocab_size at least 3");
        }
        if self.chunk_size == 0 || self.max_chunks == 0 || self.max_target_len == 0 {
            return bad("chunk_size, max_chunks and max_target_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every parameter tensor with its shape, in storage order.
    pub fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("embed".to_string(), vec![self.vocab_size, d]),
            ("enc.pos".into(), vec![self.chunk_size, d]),
            ("enc.chunk".into(), vec![self.max_chunks, d]),
            ("dec.pos".into(), vec![self.max_target_len, d]),
        ];
        let ln = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.g"), vec![d]));
            out.push((format!("{p}.b"), vec![d]));
        };
        let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{p}.{w}"), vec![d, d]));
            }
        };
        let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.w1"), vec![d, f]));
            out.push((format!("{p}.w2"), vec![f, d]));
        };
        for l in 0..self.n_enc_layers {
            ln(&mut out, &format!("enc.{l}.ln1"));
            attn(&mut out, &format!("enc.{l}.attn"));
            ln(&mut out, &format!("enc.{l}.ln2"));
            ffn(&mut out, &format!("enc.{l}.ffn"));
        }
        ln(&mut out, "enc.ln_f");
        for l in 0..self.n_dec_layers {
            ln(&mut out, &format!("dec.{l}.ln1"));
            attn(&mut out, &format!("dec.{l}.self"));
            ln(&mut out, &format!("dec.{l}.ln2"));
            attn(&mut out, &format!("dec.{l}.cross"));
            ln(&mut out, &format!("dec.{l}.ln3"));
            ffn(&mut out, &format!("dec.{l}.ffn"));
        }
        ln(&mut out, "dec.ln_f");
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attn {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ffn {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncLayer {
    pub ln1: Norm,
    pub attn: Attn,
    pub ln2: Norm,
    pub ffn: Ffn,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecLayer {
    pub ln1: Norm,
    pub self_attn: Attn,
    pub ln2: Norm,
    pub cross: Attn,
    pub ln3: Norm,
    pub ffn: Ffn,
}

/// Parameter ids resolved once from names.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub embed: ParamId,
    pub enc_pos: ParamId,
    pub enc_chunk: ParamId,
    pub dec_pos: ParamId,
    pub enc: Vec<EncLayer>,
    pub enc_ln: Norm,
    pub dec: Vec<DecLayer>,
    pub dec_ln: Norm,
}

impl Layout {
    fn resolve(config: &ModelConfig, params: &ParamStore) -> Result<Self> {
        let id = |n: &str| {
            params
                .id(n)
                .ok_or_else(|| Error::ModelFile(format!("missing tensor `{n}`")))
        };
        let norm = |p: &str| -> Result<Norm> {
            Ok(Norm {
                g: id(&format!("{p}.g"))?,
                b: id(&format!("{p}.b"))?,
            })
        };
        let attn = |p: &str| -> Result<Attn> {
            Ok(Attn {
                wq: id(&format!("{p}.wq"))?,
                wk: id(&format!("{p}.wk"))?,
                wv: id(&format!("{p}.wv"))?,
                wo: id(&format!("{p}.wo"))?,
            })
        };
        let ffn = |p: &str| -> Result<Ffn> {
            Ok(Ffn {
                w1: id(&format!("{p}.w1"))?,
                w2: id(&format!("{p}.w2"))?,
            })
        };
        Ok(Layout {
            embed: id("embed")?,
            enc_pos: id("enc.pos")?,
            enc_chunk: id("enc.chunk")?,
            dec_pos: id("dec.pos")?,
            enc: (0..config.n_enc_layers)
                .map(|l| {
                    Ok(EncLayer {
                        ln1: norm(&format!("enc.{l}.ln1"))?,
                        attn: attn(&format!("enc.{l}.attn"))?,
                        ln2: norm(&format!("enc.{l}.ln2"))?,
                        ffn: ffn(&format!("enc.{l}.ffn"))?,
                    })
                })
                .collect::<Result<_>>()?,
            enc_ln: norm("enc.ln_f")?,
            dec: (0..config.n_dec_layers)
                .map(|l| {
                    Ok(DecLayer {
                        ln1: norm(&format!("dec.{l}.ln1"))?,
                        self_attn: attn(&format!("dec.{l}.self"))?,
                        ln2: norm(&format!("dec.{l}.ln2"))?,
                        cross: attn(&format!("dec.{l}.cross"))?,
                        ln3: norm(&format!("dec.{l}.ln3"))?,
                        ffn: ffn(&format!("dec.{l}.ffn"))?,
                    })
                })
                .collect::<Result<_>>()?,
            dec_ln: norm("dec.ln_f")?,
        })
    }
}

/// Configuration plus weights. The output projection is the transposed
/// embedding table.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub(crate) layout: Layout,
}

impl Model {
    /// Fresh weights: Gaussian (std 0.02) for matrices and embeddings, unit
    /// gain and zero bias for layer norms.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.expected_shapes() {
            let t = if name.ends_with(".g") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, INIT_STD, &mut rng)
            };
            params.insert(&name, t)?;
        }
        let layout = Layout::resolve(&config, &params)?;
        Ok(Model { config, params, layout })
    }

    /// Adopt an existing parameter store, checking every tensor against the
    /// configuration.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.expected_shapes();
        for (name, shape) in &expected {
            match params.by_name(name) {
                None => return Err(Error::ModelFile(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::ModelFile(format!(
                        "tensor `{name}` has shape {:?}, configuration needs {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(Error::ModelFile(format!("tensor `{name}` has non-finite values")))
                }
                Some(_) => {}
            }
        }
        if params.len() != expected.len() {
            let extra = params
                .iter()
                .map(|(_, n, _)| n)
                .find(|n| !expected.iter().any(|(e, _)| e == n))
                .unwrap_or_default();
            return Err(Error::ModelFile(format!("unexpected tensor `{extra}`")));
        }
        let layout = Layout::resolve(&config, &params)?;
        Ok(Model { config, params, layout })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 32,
            vocab_size: 20,
            chunk_size: 8,
            max_chunks: 4,
            max_target_len: 12,
            dropout: 0.0,
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.chunk_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_matches_expected_shapes() {
        let m = Model::new(tiny(), 1).unwrap();
        assert_eq!(m.params.len(), tiny().expected_shapes().len());
        assert_eq!(m.params.by_name("enc.0.ln1.g").unwrap().data(), &[1.0; 16]);
        let std = {
            let e = m.params.by_name("embed").unwrap().data();
            (e.iter().map(|v| v * v).sum::<f32>() / e.len() as f32).sqrt()
        };
        assert!((std - INIT_STD).abs() < 0.005, "{std}");
    }

    #[test]
    fn from_params_names_the_offending_tensor() {
        let m = Model::new(tiny(), 1).unwrap();
        let mut other = tiny();
        other.d_ff = 64;
        let err = Model::from_params(other, m.params.clone()).unwrap_err().to_string();
        assert!(err.contains("enc.0.ffn.w1"), "{err}");
        assert!(Model::from_params(tiny(), m.params).is_ok());
    }
}
