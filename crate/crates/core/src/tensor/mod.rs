//! Dense float32 tensors and a small reverse-mode autodiff graph with
//! recomputation (checkpoint) segments.
//!
//! The op set is the closure a small encoder-decoder transformer needs.
//! Broadcasting is limited to a right-hand operand whose shape is a suffix
//! of the left-hand shape (leading-batch broadcast).

mod graph;
pub mod kernels;
mod meter;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use graph::{AttnMask, Gradients, Graph, NodeId, OpKind, ParamId, ParamStore, Replay};
pub use meter::Meter;

/// Row-major dense tensor. A scalar has an empty shape.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidOp {
                op: "tensor",
                msg: format!("zero-sized dimension in shape {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidOp {
                op: "tensor",
                msg: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Gaussian initialisation with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("valid std");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn uniform<R: Rng>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head: Vec<_> = self.data.iter().take(SHOWN).collect();
        if self.data.len() > SHOWN {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}
