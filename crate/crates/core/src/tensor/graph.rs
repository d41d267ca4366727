use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::Arc;

use super::kernels::{self, gemm};
use super::meter::Meter;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors. Shared read-only by graphs; updated in place by
/// the optimizer between steps.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(Arc::new(t));
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t.as_ref()))
    }

    /// Copy-on-write mutable access; in place when no graph holds the tensor.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn replace(&mut self, id: ParamId, t: Tensor) {
        self.tensors[id.0] = Arc::new(t);
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    fn shared(&self, id: ParamId) -> Arc<Tensor> {
        self.tensors[id.0].clone()
    }
}

/// Boolean mask over the trailing two axes of an attention-score tensor;
/// `false` entries receive zero probability.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        AttnMask { rows, cols, allowed }
    }

    /// Every query may attend to keys with `valid[k] == true`.
    pub fn keys(rows: usize, valid: &[bool]) -> Self {
        Self::from_fn(rows, valid.len(), |_, c| valid[c])
    }

    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

/// Operation kinds with their attributes.
#[derive(Clone, Debug)]
pub enum OpKind {
    /// `[.., m, k] x [.., k, n]`; rhs may be rank 2 and broadcast over batch.
    MatMul,
    /// Elementwise; rhs shape must be a suffix of lhs shape.
    Add,
    Mul,
    Scale(f32),
    Softmax {
        axis: usize,
        mask: Option<Arc<AttnMask>>,
    },
    /// Inputs `[x, gain, bias]`; normalises over the last axis.
    LayerNorm {
        axis: usize,
        eps: f32,
    },
    Relu,
    Gelu,
    /// Input `[table]` of shape `[V, d]`.
    Embedding {
        ids: Arc<Vec<u32>>,
    },
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Transpose {
        perm: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// Input `[logits]` of shape `[T, V]`; mean over non-pad targets.
    CrossEntropy {
        targets: Arc<Vec<u32>>,
        pad_id: u32,
    },
    Sum,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Softmax { .. } => "softmax",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Embedding { .. } => "embedding_lookup",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Transpose { .. } => "transpose",
            OpKind::Reshape { .. } => "reshape",
            OpKind::CrossEntropy { .. } => "cross_entropy",
            OpKind::Sum => "sum",
        }
    }
}

pub type Replay<'a> = Rc<dyn Fn(&mut Graph<'a>, &[NodeId]) -> Result<Vec<NodeId>> + 'a>;

#[derive(Debug)]
enum NodeOp {
    Input { requires_grad: bool },
    Param(ParamId),
    Op(OpKind),
    SegmentOutput { seg: usize },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: NodeOp,
    inputs: Vec<NodeId>,
}

struct SegmentRecord<'a> {
    label: String,
    replay: Replay<'a>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
}

/// Gradients produced by a backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    inputs: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Gradients {
            params: vec![None; n_params],
            inputs: HashMap::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn input(&self, id: NodeId) -> Option<&Tensor> {
        self.inputs.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    fn accumulate_param(&mut self, id: ParamId, g: Tensor) {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        match &mut self.params[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Largest absolute element-wise difference over all parameter
    /// gradients; a gradient missing on one side compares against zero.
    pub fn max_abs_diff(&self, other: &Gradients) -> f32 {
        let n = self.params.len().max(other.params.len());
        let mut worst = 0.0f32;
        for i in 0..n {
            let a = self.params.get(i).and_then(|g| g.as_ref());
            let b = other.params.get(i).and_then(|g| g.as_ref());
            let d = match (a, b) {
                (Some(a), Some(b)) => a.max_abs_diff(b),
                (Some(g), None) | (None, Some(g)) => g.data().iter().fold(0.0f32, |m, v| m.max(v.abs())),
                (None, None) => 0.0,
            };
            worst = worst.max(d);
        }
        worst
    }
}

/// A recording of one forward computation.
///
/// Nodes are appended in execution order, which is a topological order;
/// backward walks it in reverse. Segments recorded with `checkpoint = true`
/// keep only their outputs and rebuild their interior on a child graph
/// during backward.
pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    segments: Vec<SegmentRecord<'a>>,
    param_nodes: HashMap<ParamId, NodeId>,
    meter: Rc<Meter>,
    counted: usize,
    grad_enabled: bool,
    segment_id: Option<u32>,
}

impl Drop for Graph<'_> {
    fn drop(&mut self) {
        self.meter.free(self.counted);
    }
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self::with_meter(params, Rc::new(Meter::new()))
    }

    pub fn with_meter(params: &'a ParamStore, meter: Rc<Meter>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            segments: Vec::new(),
            param_nodes: HashMap::new(),
            meter,
            counted: 0,
            grad_enabled: true,
            segment_id: None,
        }
    }

    /// A graph that records no segments; checkpoint requests run inline.
    pub fn inference(params: &'a ParamStore) -> Self {
        let mut g = Self::new(params);
        g.grad_enabled = false;
        g
    }

    fn child(&self, segment_id: u32) -> Graph<'a> {
        Graph {
            params: self.params,
            nodes: Vec::new(),
            segments: Vec::new(),
            param_nodes: HashMap::new(),
            meter: self.meter.clone(),
            counted: 0,
            grad_enabled: self.grad_enabled,
            segment_id: Some(segment_id),
        }
    }

    pub fn meter(&self) -> &Rc<Meter> {
        &self.meter
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Identifier of the checkpoint segment this graph replays, if any.
    pub fn segment_id(&self) -> Option<u32> {
        self.segment_id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scalars held by interior (non-leaf) nodes of this graph alone.
    pub fn interior_scalars(&self) -> usize {
        self.counted
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Arc<Tensor>, op: NodeOp, inputs: Vec<NodeId>, counted: bool) -> NodeId {
        if counted {
            let n = value.numel();
            self.counted += n;
            self.meter.alloc(n);
        }
        self.nodes.push(Node { value, op, inputs });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by backward.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Arc::new(t), NodeOp::Input { requires_grad: true }, vec![], false)
    }

    /// Leaf that never receives a gradient (masks, dropout patterns).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Arc::new(t), NodeOp::Input { requires_grad: false }, vec![], false)
    }

    fn shared_input(&mut self, t: Arc<Tensor>) -> NodeId {
        self.push(t, NodeOp::Input { requires_grad: true }, vec![], false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let v = self.params.shared(id);
        let n = self.push(v, NodeOp::Param(id), vec![], false);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn param_named(&mut self, name: &str) -> Result<NodeId> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        Ok(self.param(id))
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.0))
        }
    }

    /// Apply `kind` to `inputs`, recording it for backward.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        for &i in inputs {
            self.check(i)?;
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.nodes[i.0].value.as_ref()).collect();
        let out = forward(&kind, &vals)?;
        if !out.is_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        Ok(self.push(Arc::new(out), NodeOp::Op(kind), inputs.to_vec(), true))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, s: f32) -> Result<NodeId> {
        self.apply(OpKind::Scale(s), &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Gelu, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(OpKind::Softmax { axis, mask: None }, &[a])
    }
    pub fn masked_softmax(&mut self, a: NodeId, mask: Arc<AttnMask>) -> Result<NodeId> {
        let axis = self.shape(a).len().saturating_sub(1);
        self.apply(OpKind::Softmax { axis, mask: Some(mask) }, &[a])
    }
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f32) -> Result<NodeId> {
        let axis = self.shape(x).len().saturating_sub(1);
        self.apply(OpKind::LayerNorm { axis, eps }, &[x, gain, bias])
    }
    pub fn embedding(&mut self, table: NodeId, ids: Arc<Vec<u32>>) -> Result<NodeId> {
        self.apply(OpKind::Embedding { ids }, &[table])
    }
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(OpKind::Concat { axis }, xs)
    }
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.apply(OpKind::Slice { axis, start, end }, &[x])
    }
    pub fn transpose(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        self.apply(OpKind::Transpose { perm: perm.to_vec() }, &[x])
    }
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(OpKind::Reshape { shape: shape.to_vec() }, &[x])
    }
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Arc<Vec<u32>>, pad_id: u32) -> Result<NodeId> {
        self.apply(OpKind::CrossEntropy { targets, pad_id }, &[logits])
    }

    /// Run `replay` on `inputs`.
    ///
    /// With `checkpoint` set (and gradients enabled) the interior is computed
    /// on a child graph that is dropped immediately; only the outputs are
    /// kept here. Backward re-executes `replay`, checks the outputs are
    /// bitwise identical, and backpropagates through the rebuilt interior.
    /// Without `checkpoint` the replay runs inline on this graph.
    pub fn segment(
        &mut self,
        label: &str,
        inputs: &[NodeId],
        replay: Replay<'a>,
        checkpoint: bool,
    ) -> Result<Vec<NodeId>> {
        for &i in inputs {
            self.check(i)?;
        }
        if !checkpoint || !self.grad_enabled {
            return replay(self, inputs);
        }
        let seg = self.segments.len();
        let (values, passthrough) = {
            let mut sub = self.child(seg as u32);
            let leaves: Vec<NodeId> = inputs
                .iter()
                .map(|&i| sub.shared_input(self.nodes[i.0].value.clone()))
                .collect();
            let outs = replay(&mut sub, &leaves)?;
            let mut values = Vec::with_capacity(outs.len());
            let mut passthrough = Vec::with_capacity(outs.len());
            for o in outs {
                sub.check(o)?;
                values.push(sub.nodes[o.0].value.clone());
                passthrough.push(leaves.contains(&o));
            }
            (values, passthrough)
        };
        let mut outputs = Vec::with_capacity(values.len());
        for (v, pass) in values.into_iter().zip(passthrough) {
            let id = self.push(v, NodeOp::SegmentOutput { seg }, inputs.to_vec(), !pass);
            outputs.push(id);
        }
        self.segments.push(SegmentRecord {
            label: label.to_string(),
            replay,
            inputs: inputs.to_vec(),
            outputs: outputs.clone(),
        });
        Ok(outputs)
    }

    /// Gradients of a scalar `loss` with respect to every reachable
    /// parameter and `input` leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Backward with upstream gradient `upstream` at the loss.
    pub fn backward_scaled(&self, loss: NodeId, upstream: f32) -> Result<Gradients> {
        self.check(loss)?;
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let seed = Tensor::from_parts(shape.to_vec(), vec![upstream]);
        let mut grads = Gradients::new(self.params.len());
        let input_grads = self.backward_seeded(vec![(loss, seed)], &mut grads)?;
        for (i, g) in input_grads.into_iter().enumerate() {
            if let Some(g) = g {
                grads.inputs.insert(NodeId(i), g);
            }
        }
        Ok(grads)
    }

    /// Reverse sweep from `seeds`. Parameter gradients accumulate into `acc`;
    /// the returned vector holds gradients of this graph's input leaves.
    fn backward_seeded(&self, seeds: Vec<(NodeId, Tensor)>, acc: &mut Gradients) -> Result<Vec<Option<Tensor>>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            self.check(id)?;
            accumulate(&mut grads[id.0], g);
        }
        let mut done_segments: HashSet<usize> = HashSet::new();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            match &node.op {
                NodeOp::Input { requires_grad } => {
                    if !requires_grad {
                        grads[idx] = None;
                    }
                }
                NodeOp::Param(pid) => {
                    if let Some(g) = grads[idx].take() {
                        acc.accumulate_param(*pid, g);
                    }
                }
                NodeOp::Op(kind) => {
                    let Some(g) = grads[idx].take() else { continue };
                    let vals: Vec<&Tensor> = node.inputs.iter().map(|&i| self.nodes[i.0].value.as_ref()).collect();
                    let input_grads = backward_op(kind, &vals, &node.value, &g)?;
                    for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                        if let Some(ig) = ig {
                            accumulate(&mut grads[inp.0], ig);
                        }
                    }
                }
                NodeOp::SegmentOutput { seg, .. } => {
                    if !done_segments.insert(*seg) {
                        grads[idx] = None;
                        continue;
                    }
                    let rec = &self.segments[*seg];
                    let mut seeds = Vec::new();
                    for (k, &o) in rec.outputs.iter().enumerate() {
                        if let Some(g) = grads[o.0].take() {
                            seeds.push((k, g));
                        }
                    }
                    if seeds.is_empty() {
                        continue;
                    }
                    let input_grads = self.replay_backward(*seg, seeds, acc)?;
                    for (&inp, ig) in rec.inputs.iter().zip(input_grads) {
                        if let Some(ig) = ig {
                            accumulate(&mut grads[inp.0], ig);
                        }
                    }
                }
            }
        }
        Ok(self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match n.op {
                NodeOp::Input { requires_grad: true } => g,
                _ => None,
            })
            .collect())
    }

    fn replay_backward(
        &self,
        seg: usize,
        seeds: Vec<(usize, Tensor)>,
        acc: &mut Gradients,
    ) -> Result<Vec<Option<Tensor>>> {
        let rec = &self.segments[seg];
        let mut sub = self.child(seg as u32);
        let leaves: Vec<NodeId> = rec
            .inputs
            .iter()
            .map(|&i| sub.shared_input(self.nodes[i.0].value.clone()))
            .collect();
        let outs = (rec.replay)(&mut sub, &leaves)?;
        if outs.len() != rec.outputs.len() {
            return Err(Error::ReplayMismatch(rec.label.clone()));
        }
        for (&o, &stored) in outs.iter().zip(&rec.outputs) {
            sub.check(o)?;
            let a = sub.nodes[o.0].value.as_ref();
            let b = self.nodes[stored.0].value.as_ref();
            if a.shape() != b.shape() || a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Err(Error::ReplayMismatch(rec.label.clone()));
            }
        }
        let sub_seeds = seeds.into_iter().map(|(k, g)| (outs[k], g)).collect();
        let sub_grads = sub.backward_seeded(sub_seeds, acc)?;
        Ok(leaves.iter().map(|l| sub_grads[l.0].clone()).collect())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn arity(kind: &OpKind, vals: &[&Tensor], n: usize) -> Result<()> {
    if vals.len() != n {
        return Err(Error::InvalidOp {
            op: kind.name(),
            msg: format!("expected {n} inputs, got {}", vals.len()),
        });
    }
    Ok(())
}

/// `b` broadcasts over `a` when its shape is a suffix of `a`'s shape.
fn suffix_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
        return Err(shape_err(op, a, b));
    }
    Ok(())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize, bool)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(shape_err("matmul", a, b));
    }
    let batch: usize = sa[..sa.len() - 2].iter().product();
    let broadcast = sb.len() == 2;
    if !broadcast && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(shape_err("matmul", a, b));
    }
    Ok((batch, m, k, n, broadcast))
}

fn softmax_mask_check(kind: &OpKind, x: &Tensor, axis: usize, mask: &Option<Arc<AttnMask>>) -> Result<()> {
    let s = x.shape();
    if axis >= s.len() {
        return Err(Error::InvalidOp {
            op: kind.name(),
            msg: format!("axis {axis} out of range for shape {s:?}"),
        });
    }
    if let Some(m) = mask {
        if axis + 1 != s.len() || s.len() < 2 || m.rows != s[s.len() - 2] || m.cols != s[s.len() - 1] {
            return Err(Error::InvalidOp {
                op: kind.name(),
                msg: format!("mask {}x{} does not fit scores {s:?}", m.rows, m.cols),
            });
        }
    }
    Ok(())
}

fn forward(kind: &OpKind, vals: &[&Tensor]) -> Result<Tensor> {
    match kind {
        OpKind::MatMul => {
            arity(kind, vals, 2)?;
            let (a, b) = (vals[0], vals[1]);
            let (batch, m, k, n, bcast) = matmul_dims(a, b)?;
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                let bs = if bcast {
                    b.data()
                } else {
                    &b.data()[bi * k * n..(bi + 1) * k * n]
                };
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    false,
                    bs,
                    false,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
            let mut shape = a.shape()[..a.shape().len() - 1].to_vec();
            shape.push(n);
            Ok(Tensor::from_parts(shape, out))
        }
        OpKind::Add | OpKind::Mul => {
            arity(kind, vals, 2)?;
            let (a, b) = (vals[0], vals[1]);
            suffix_broadcast(kind.name(), a, b)?;
            let bn = b.numel();
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    if matches!(kind, OpKind::Add) {
                        x + bd[i % bn]
                    } else {
                        x * bd[i % bn]
                    }
                })
                .collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        OpKind::Scale(s) => {
            arity(kind, vals, 1)?;
            let x = vals[0];
            Ok(Tensor::from_parts(
                x.shape().to_vec(),
                x.data().iter().map(|v| v * s).collect(),
            ))
        }
        OpKind::Relu => {
            arity(kind, vals, 1)?;
            let x = vals[0];
            Ok(Tensor::from_parts(
                x.shape().to_vec(),
                x.data().iter().map(|v| v.max(0.0)).collect(),
            ))
        }
        OpKind::Gelu => {
            arity(kind, vals, 1)?;
            let x = vals[0];
            Ok(Tensor::from_parts(
                x.shape().to_vec(),
                x.data().iter().map(|&v| kernels::gelu(v)).collect(),
            ))
        }
        OpKind::Sum => {
            arity(kind, vals, 1)?;
            Ok(Tensor::scalar(vals[0].data().iter().sum()))
        }
        OpKind::Softmax { axis, mask } => {
            arity(kind, vals, 1)?;
            let x = vals[0];
            softmax_mask_check(kind, x, *axis, mask)?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut data = x.data().to_vec();
            if inner == 1 {
                match mask {
                    Some(m) => {
                        let rows = m.rows;
                        let f = move |r: usize, c: usize| m.allowed(r % rows, c);
                        kernels::softmax_rows(&mut data, len, Some(&f));
                    }
                    None => kernels::softmax_rows(&mut data, len, None),
                }
            } else {
                let mut lane = vec![0.0; len];
                for o in 0..outer {
                    for i in 0..inner {
                        for j in 0..len {
                            lane[j] = data[(o * len + j) * inner + i];
                        }
                        kernels::softmax_rows(&mut lane, len, None);
                        for j in 0..len {
                            data[(o * len + j) * inner + i] = lane[j];
                        }
                    }
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        }
        OpKind::LayerNorm { axis, eps } => {
            arity(kind, vals, 3)?;
            let (x, gain, bias) = (vals[0], vals[1], vals[2]);
            let s = x.shape();
            if s.is_empty() || *axis + 1 != s.len() {
                return Err(Error::InvalidOp {
                    op: kind.name(),
                    msg: format!("only the last axis is supported (axis {axis}, shape {s:?})"),
                });
            }
            let d = s[s.len() - 1];
            if gain.shape() != [d] || bias.shape() != [d] {
                return Err(shape_err(kind.name(), x, gain));
            }
            let mut out = vec![0.0; x.numel()];
            kernels::layer_norm_rows(x.data(), d, gain.data(), bias.data(), *eps, &mut out);
            Ok(Tensor::from_parts(s.to_vec(), out))
        }
        OpKind::Embedding { ids } => {
            arity(kind, vals, 1)?;
            let table = vals[0];
            if table.shape().len() != 2 || ids.is_empty() {
                return Err(Error::InvalidOp {
                    op: kind.name(),
                    msg: format!("table shape {:?} with {} ids", table.shape(), ids.len()),
                });
            }
            let (v, d) = (table.shape()[0], table.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids.iter() {
                let id = id as usize;
                if id >= v {
                    return Err(Error::InvalidOp {
                        op: kind.name(),
                        msg: format!("id {id} out of range for vocab {v}"),
                    });
                }
                out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
            }
            Ok(Tensor::from_parts(vec![ids.len(), d], out))
        }
        OpKind::Concat { axis } => {
            if vals.is_empty() {
                return Err(Error::InvalidOp {
                    op: kind.name(),
                    msg: "no inputs".into(),
                });
            }
            let first = vals[0];
            let rank = first.shape().len();
            if *axis >= rank {
                return Err(Error::InvalidOp {
                    op: kind.name(),
                    msg: format!("axis {axis} out of range for rank {rank}"),
                });
            }
            let mut total = 0;
            for v in vals {
                let s = v.shape();
                if s.len() != rank || s.iter().enumerate().any(|(i, &d)| i != *axis && d != first.shape()[i]) {
                    return Err(shape_err(kind.name(), first, v));
                }
                total += s[*axis];
            }
            let (outer, _, inner) = split_axis(first.shape(), *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in vals {
                    let len = v.shape()[*axis] * inner;
                    out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            Ok(Tensor::from_parts(shape, out))
        }
        OpKind::Slice { axis, start, end } => {
            arity(kind, vals, 1)?;
            let x = vals[0];
            let s = x.shape();
            if *axis >= s.len() || start >= end || *end > s[*axis] {
                return Err(Error::InvalidOp {
                    op: kind.name(),
                    msg: format!("range {start}..{end} on axis {axis} of {s:?}"),
                });
            }
            let (outer, len, inner) = split_axis(s, *axis);
            let w = (end - start) * inner;
            let mut out = Vec::with_capacity(outer * w);
            for o in 0..outer {
                let base = o * len * inner + start * inner;
                out.extend_from_slice(&x.data()[base..base + w]);
            }
            let mut shape = s.to_vec();
            shape[*axis] = end - start;
            Ok(Tensor::from_parts(shape, out))
        }
        OpKind::Transpose { perm } => {
            arity(kind, vals, 1)?;
            let x = vals[0];
            let mut seen = perm.clone();
            seen.sort_unstable();
            if perm.len() != x.shape().len() || seen.iter().enumerate().any(|(i, &p)| i != p) {
                return Err(Error::InvalidOp {
                    op: kind.name(),
                    msg: format!("invalid permutation {perm:?} for shape {:?}", x.shape()),
                });
            }
            let (shape, data) = kernels::permute(x.data(), x.shape(), perm);
            Ok(Tensor::from_parts(shape, data))
        }
        OpKind::Reshape { shape } => {
            arity(kind, vals, 1)?;
            let x = vals[0];
            if shape.iter().product::<usize>() != x.numel() || shape.contains(&0) {
                return Err(Error::Shape {
                    op: kind.name(),
                    lhs: x.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Ok(Tensor::from_parts(shape.clone(), x.data().to_vec()))
        }
        OpKind::CrossEntropy { targets, pad_id } => {
            arity(kind, vals, 1)?;
            let logits = vals[0];
            let s = logits.shape();
            if s.len() != 2 || s[0] != targets.len() {
                return Err(Error::InvalidOp {
                    op: kind.name(),
                    msg: format!("logits {s:?} vs {} targets", targets.len()),
                });
            }
            let v = s[1];
            let mut total = 0.0f64;
            let mut count = 0usize;
            for (t, &target) in targets.iter().enumerate() {
                if target == *pad_id {
                    continue;
                }
                if target as usize >= v {
                    return Err(Error::InvalidOp {
                        op: kind.name(),
                        msg: format!("target {target} out of range for {v} classes"),
                    });
                }
                let row = &logits.data()[t * v..(t + 1) * v];
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let lse = row.iter().map(|x| (x - max).exp()).sum::<f32>().ln() + max;
                total += (lse - row[target as usize]) as f64;
                count += 1;
            }
            let loss = if count == 0 { 0.0 } else { (total / count as f64) as f32 };
            Ok(Tensor::scalar(loss))
        }
    }
}

/// Sum `g` (shaped like `a`) down to the suffix shape of `b`.
fn reduce_to_suffix(g: &[f32], b_shape: &[usize]) -> Tensor {
    let bn: usize = b_shape.iter().product();
    let mut out = vec![0.0; bn];
    for (i, v) in g.iter().enumerate() {
        out[i % bn] += v;
    }
    Tensor::from_parts(b_shape.to_vec(), out)
}

fn backward_op(kind: &OpKind, vals: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let gd = g.data();
    Ok(match kind {
        OpKind::MatMul => {
            let (a, b) = (vals[0], vals[1]);
            let (batch, m, k, n, bcast) = matmul_dims(a, b)?;
            let mut da = vec![0.0; a.numel()];
            let mut db = vec![0.0; b.numel()];
            for bi in 0..batch {
                let gs = &gd[bi * m * n..(bi + 1) * m * n];
                let (bs, dbs) = if bcast {
                    (b.data(), &mut db[..])
                } else {
                    (
                        &b.data()[bi * k * n..(bi + 1) * k * n],
                        &mut db[bi * k * n..(bi + 1) * k * n],
                    )
                };
                gemm(
                    m,
                    n,
                    k,
                    gs,
                    false,
                    bs,
                    true,
                    &mut da[bi * m * k..(bi + 1) * m * k],
                    false,
                );
                gemm(
                    k,
                    m,
                    n,
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    true,
                    gs,
                    false,
                    dbs,
                    bcast,
                );
            }
            vec![
                Some(Tensor::from_parts(a.shape().to_vec(), da)),
                Some(Tensor::from_parts(b.shape().to_vec(), db)),
            ]
        }
        OpKind::Add => vec![Some(g.clone()), Some(reduce_to_suffix(gd, vals[1].shape()))],
        OpKind::Mul => {
            let (a, b) = (vals[0], vals[1]);
            let bn = b.numel();
            let da: Vec<f32> = gd.iter().enumerate().map(|(i, v)| v * b.data()[i % bn]).collect();
            let gb: Vec<f32> = gd.iter().zip(a.data()).map(|(v, x)| v * x).collect();
            vec![
                Some(Tensor::from_parts(a.shape().to_vec(), da)),
                Some(reduce_to_suffix(&gb, b.shape())),
            ]
        }
        OpKind::Scale(s) => vec![Some(Tensor::from_parts(
            g.shape().to_vec(),
            gd.iter().map(|v| v * s).collect(),
        ))],
        OpKind::Relu => {
            let x = vals[0];
            vec![Some(Tensor::from_parts(
                x.shape().to_vec(),
                gd.iter()
                    .zip(x.data())
                    .map(|(v, &x)| if x > 0.0 { *v } else { 0.0 })
                    .collect(),
            ))]
        }
        OpKind::Gelu => {
            let x = vals[0];
            vec![Some(Tensor::from_parts(
                x.shape().to_vec(),
                gd.iter()
                    .zip(x.data())
                    .map(|(v, &x)| v * kernels::gelu_grad(x))
                    .collect(),
            ))]
        }
        OpKind::Sum => {
            let x = vals[0];
            vec![Some(Tensor::full(x.shape(), gd[0]))]
        }
        OpKind::Softmax { axis, .. } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: f32 = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(out.shape().to_vec(), dx))]
        }
        OpKind::LayerNorm { eps, .. } => {
            let (x, gain) = (vals[0], vals[1]);
            let d = *x.shape().last().unwrap();
            let mut dx = vec![0.0; x.numel()];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            let mut xhat = vec![0.0; d];
            let mut dyh = vec![0.0; d];
            for (r, row) in x.data().chunks(d).enumerate() {
                let gr = &gd[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f32>() / d as f32;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                let inv = 1.0 / (var + eps).sqrt();
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..d {
                    xhat[j] = (row[j] - mean) * inv;
                    dyh[j] = gr[j] * gain.data()[j];
                    dgain[j] += gr[j] * xhat[j];
                    dbias[j] += gr[j];
                    m1 += dyh[j];
                    m2 += dyh[j] * xhat[j];
                }
                m1 /= d as f32;
                m2 /= d as f32;
                for j in 0..d {
                    dx[r * d + j] = inv * (dyh[j] - m1 - xhat[j] * m2);
                }
            }
            vec![
                Some(Tensor::from_parts(x.shape().to_vec(), dx)),
                Some(Tensor::from_parts(vec![d], dgain)),
                Some(Tensor::from_parts(vec![d], dbias)),
            ]
        }
        OpKind::Embedding { ids } => {
            let table = vals[0];
            let d = table.shape()[1];
            let mut dt = vec![0.0; table.numel()];
            for (r, &id) in ids.iter().enumerate() {
                let id = id as usize;
                for j in 0..d {
                    dt[id * d + j] += gd[r * d + j];
                }
            }
            vec![Some(Tensor::from_parts(table.shape().to_vec(), dt))]
        }
        OpKind::Concat { axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut grads: Vec<Vec<f32>> = vals.iter().map(|v| Vec::with_capacity(v.numel())).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (k, v) in vals.iter().enumerate() {
                    let len = v.shape()[*axis] * inner;
                    grads[k].extend_from_slice(&gd[off..off + len]);
                    off += len;
                }
            }
            vals.iter()
                .zip(grads)
                .map(|(v, g)| Some(Tensor::from_parts(v.shape().to_vec(), g)))
                .collect()
        }
        OpKind::Slice { axis, start, end } => {
            let x = vals[0];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let w = (end - start) * inner;
            let mut dx = vec![0.0; x.numel()];
            for o in 0..outer {
                let base = o * len * inner + start * inner;
                dx[base..base + w].copy_from_slice(&gd[o * w..(o + 1) * w]);
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))]
        }
        OpKind::Transpose { perm } => {
            let (shape, data) = kernels::permute(gd, g.shape(), &kernels::inverse_perm(perm));
            vec![Some(Tensor::from_parts(shape, data))]
        }
        OpKind::Reshape { .. } => vec![Some(Tensor::from_parts(vals[0].shape().to_vec(), gd.to_vec()))],
        OpKind::CrossEntropy { targets, pad_id } => {
            let logits = vals[0];
            let v = logits.shape()[1];
            let count = targets.iter().filter(|&&t| t != *pad_id).count();
            let mut dl = vec![0.0; logits.numel()];
            if count > 0 {
                let w = gd[0] / count as f32;
                for (t, &target) in targets.iter().enumerate() {
                    if target == *pad_id {
                        continue;
                    }
                    let row = &logits.data()[t * v..(t + 1) * v];
                    let drow = &mut dl[t * v..(t + 1) * v];
                    drow.copy_from_slice(row);
                    kernels::softmax_rows(drow, v, None);
                    drow[target as usize] -= 1.0;
                    for x in drow.iter_mut() {
                        *x *= w;
                    }
                }
            }
            vec![Some(Tensor::from_parts(logits.shape().to_vec(), dl))]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert(name, t).unwrap();
        (s, id)
    }

    #[test]
    fn matmul_identity() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let a = Tensor::new(vec![3, 2], vec![1.0, -2.0, 3.5, 4.0, 0.25, 6.0]).unwrap();
        let i = g.input(eye);
        let an = g.input(a.clone());
        let out = g.matmul(i, an).unwrap();
        assert_eq!(g.value(out), &a);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::zeros(&[4]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2_and_grad_is_softmax_minus_onehot() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::zeros(&[1, 2]));
        let l = g.cross_entropy(x, Arc::new(vec![0]), u32::MAX).unwrap();
        assert!((g.value(l).item() - std::f32::consts::LN_2).abs() < 1e-6);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.input(x).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let (s, w) = store_with("w", Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let mut g = Graph::new(&s);
        let wn = g.param(w);
        let sq = g.mul(wn, wn).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.input(Tensor::from_vec(vec![f32::MAX, 1.0]));
        let err = g.scale(a, 4.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale" }));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.input(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn identity_segment_passes_through_without_storage() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        let before = g.meter().peak();
        let outs = g.segment("id", &[x], Rc::new(|_, xs| Ok(xs.to_vec())), true).unwrap();
        assert_eq!(g.value(outs[0]).data(), &[1.0, 2.0]);
        assert_eq!(g.meter().peak(), before);
        assert_eq!(g.interior_scalars(), 0);
        let l = g.sum(outs[0]).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.input(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn nondeterministic_replay_is_detected() {
        use std::cell::Cell;
        let s = ParamStore::new();
        let calls = Cell::new(0.0f32);
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        let replay: Replay = Rc::new(|g: &mut Graph, xs: &[NodeId]| {
            calls.set(calls.get() + 1.0);
            let y = g.scale(xs[0], calls.get())?;
            Ok(vec![y])
        });
        let outs = g.segment("noisy", &[x], replay, true).unwrap();
        let l = g.sum(outs[0]).unwrap();
        assert!(matches!(g.backward(l), Err(Error::ReplayMismatch(label)) if label == "noisy"));
    }
}
