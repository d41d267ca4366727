//! Central finite-difference audit of graph ops.

use std::sync::Arc;

use doc2dict::tensor::{AttnMask, Graph, NodeId, ParamStore, Tensor};
use doc2dict::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f32 = 1e-3;

pub type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    /// Inputs whose gradient is audited.
    pub differentiable: Vec<usize>,
    pub build: Build,
}

/// Largest elementwise `|analytic - numeric| / max(|analytic|, |numeric|, 1)`
/// for `sum(w * op(inputs))` with fixed random weights `w`.
pub fn audit(case: &OpCase, seed: u64) -> f32 {
    let ps = ParamStore::new();
    let out_shape = {
        let mut g = Graph::inference(&ps);
        let ids: Vec<NodeId> = case.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (case.build)(&mut g, &ids).unwrap();
        g.shape(out).to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(&out_shape, -1.0, 1.0, &mut rng);

    let analytic = {
        let mut g = Graph::new(&ps);
        let ids: Vec<NodeId> = case.inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = (case.build)(&mut g, &ids).unwrap();
        let wn = g.constant(w.clone());
        let prod = g.mul(out, wn).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        ids.iter()
            .map(|&i| grads.input(i).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(i))))
            .collect::<Vec<_>>()
    };

    let loss_at = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::inference(&ps);
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (case.build)(&mut g, &ids).unwrap();
        g.value(out)
            .data()
            .iter()
            .zip(w.data())
            .map(|(&y, &w)| f64::from(y) * f64::from(w))
            .sum()
    };

    let mut worst = 0.0f32;
    for &k in &case.differentiable {
        for e in 0..case.inputs[k].numel() {
            let shifted = |delta: f32| {
                let mut inputs = case.inputs.clone();
                let mut data = inputs[k].data().to_vec();
                data[e] += delta;
                inputs[k] = Tensor::new(inputs[k].shape().to_vec(), data).unwrap();
                inputs
            };
            let numeric = ((loss_at(&shifted(H)) - loss_at(&shifted(-H))) / (2.0 * f64::from(H))) as f32;
            let a = analytic[k].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero so kinks stay outside the difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// One case per op kind, every input at most 64 elements.
pub fn all_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    vec![
        OpCase {
            name: "matmul",
            inputs: vec![randn(r, &[3, 4]), randn(r, &[4, 5])],
            differentiable: vec![0, 1],
            build: Box::new(|g, x| g.matmul(x[0], x[1])),
        },
        OpCase {
            name: "matmul_batched",
            inputs: vec![randn(r, &[2, 3, 4]), randn(r, &[4, 2])],
            differentiable: vec![0, 1],
            build: Box::new(|g, x| g.matmul(x[0], x[1])),
        },
        OpCase {
            name: "add_broadcast",
            inputs: vec![randn(r, &[4, 5]), randn(r, &[5])],
            differentiable: vec![0, 1],
            build: Box::new(|g, x| g.add(x[0], x[1])),
        },
        OpCase {
            name: "mul",
            inputs: vec![randn(r, &[3, 5]), randn(r, &[3, 5])],
            differentiable: vec![0, 1],
            build: Box::new(|g, x| g.mul(x[0], x[1])),
        },
        OpCase {
            name: "mul_broadcast",
            inputs: vec![randn(r, &[2, 3, 4]), randn(r, &[4])],
            differentiable: vec![0, 1],
            build: Box::new(|g, x| g.mul(x[0], x[1])),
        },
        OpCase {
            name: "scale",
            inputs: vec![randn(r, &[4, 4])],
            differentiable: vec![0],
            build: Box::new(|g, x| g.scale(x[0], -0.7)),
        },
        OpCase {
            name: "softmax",
            inputs: vec![randn(r, &[4, 6])],
            differentiable: vec![0],
            build: Box::new(|g, x| g.softmax(x[0], 1)),
        },
        OpCase {
            name: "softmax_axis0",
            inputs: vec![randn(r, &[5, 3])],
            differentiable: vec![0],
            build: Box::new(|g, x| g.softmax(x[0], 0)),
        },
        OpCase {
            name: "masked_softmax",
            inputs: vec![randn(r, &[2, 4, 4])],
            differentiable: vec![0],
            build: Box::new(|g, x| g.masked_softmax(x[0], Arc::new(AttnMask::causal(4)))),
        },
        OpCase {
            name: "layer_norm",
            inputs: vec![randn(r, &[4, 8]), randn(r, &[8]), randn(r, &[8])],
            differentiable: vec![0, 1, 2],
            build: Box::new(|g, x| g.layer_norm(x[0], x[1], x[2], 1e-5)),
        },
        OpCase {
            name: "relu",
            inputs: vec![away_from_zero(r, &[5, 6])],
            differentiable: vec![0],
            build: Box::new(|g, x| g.relu(x[0])),
        },
        OpCase {
            name: "gelu",
            inputs: vec![randn(r, &[5, 6])],
            differentiable: vec![0],
            build: Box::new(|g, x| g.gelu(x[0])),
        },
        OpCase {
            name: "embedding_lookup",
            inputs: vec![randn(r, &[6, 4])],
            differentiable: vec![0],
            build: Box::new(|g, x| g.embedding(x[0], Arc::new(vec![0, 3, 3, 5, 1]))),
        },
        OpCase {
            name: "concat",
            inputs: vec![randn(r, &[2, 3]), randn(r, &[4, 3])],
            differentiable: vec![0, 1],
            build: Box::new(|g, x| g.concat(&[x[0], x[1]], 0)),
        },
        OpCase {
            name: "concat_axis1",
            inputs: vec![randn(r, &[3, 2]), randn(r, &[3, 5])],
            differentiable: vec![0, 1],
            build: Box::new(|g, x| g.concat(&[x[0], x[1]], 1)),
        },
        OpCase {
            name: "slice",
            inputs: vec![randn(r, &[4, 6])],
            differentiable: vec![0],
            build: Box::new(|g, x| g.slice(x[0], 1, 2, 5)),
        },
        OpCase {
            name: "transpose",
            inputs: vec![randn(r, &[2, 3, 4])],
            differentiable: vec![0],
            build: Box::new(|g, x| g.transpose(x[0], &[2, 0, 1])),
        },
        OpCase {
            name: "reshape",
            inputs: vec![randn(r, &[2, 3, 4])],
            differentiable: vec![0],
            build: Box::new(|g, x| g.reshape(x[0], &[6, 4])),
        },
        OpCase {
            name: "cross_entropy",
            inputs: vec![randn(r, &[5, 7])],
            differentiable: vec![0],
            build: Box::new(|g, x| g.cross_entropy(x[0], Arc::new(vec![3, 0, 6, 1, 0]), 0)),
        },
        OpCase {
            name: "sum",
            inputs: vec![randn(r, &[4, 5])],
            differentiable: vec![0],
            build: Box::new(|g, x| g.sum(x[0])),
        },
    ]
}
