//! Dense-tensor core with reverse-mode automatic differentiation.
//!
//! A `Graph` records primitive applications on a tape during the forward
//! pass; `backward` replays the tape in reverse, applying each primitive's
//! vector-Jacobian product and accumulating gradients into the leaves.
//! Values are `f64` throughout; persistence elsewhere narrows to `f32`.

mod attention;
mod check;
mod conv;
mod elementwise;
mod linalg;

pub use check::finite_diff_check;

use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Identity of a node within one computation graph.
pub type NodeId = usize;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("unknown primitive kind `{0}`")]
    UnknownKind(String),
    #[error("{op}: missing or invalid attribute `{attr}`")]
    BadAttr { op: &'static str, attr: &'static str },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor is not attached to this graph")]
    Detached,
    #[error("backward already ran on this graph")]
    BackwardConsumed,
}

pub type Result<T> = std::result::Result<T, GradError>;

/// An n-dimensional array of `f64`, row-major, optionally attached to a
/// computation graph. Values are immutable once created.
#[derive(Clone)]
pub struct DiffTensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    graph: u64,
    node: Option<NodeId>,
}

impl DiffTensor {
    /// A tensor that belongs to no graph (a plain value).
    pub fn detached(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(GradError::ShapeMismatch {
                op: "detached",
                details: format!("shape {:?} does not hold {} values", shape, data.len()),
            });
        }
        Ok(DiffTensor { shape: shape.to_vec(), data: Rc::new(data), graph: 0, node: None })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.numel(), 1, "scalar() on tensor of shape {:?}", self.shape);
        self.data[0]
    }
}

impl fmt::Debug for DiffTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DiffTensor(shape={:?}, node={:?})", self.shape, self.node)
    }
}

/// Cached state for the fused multi-head attention primitive. Masking is
/// already baked into `attn` (masked entries are exactly zero), so the
/// backward pass needs no mask of its own.
pub(crate) struct MhaCache {
    pub heads: usize,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub ctx: Vec<f64>,
    /// Post-softmax attention, `heads * T * T`.
    pub attn: Vec<f64>,
}

pub(crate) enum Op {
    Leaf,
    Add,
    Mul,
    Scale { factor: f64 },
    Relu,
    Log,
    Exp,
    Softmax,
    L2Normalize { norms: Vec<f64> },
    LayerNorm { xhat: Vec<f64>, rstd: Vec<f64> },
    Matmul { ta: bool, tb: bool },
    Linear,
    Embedding { ids: Vec<usize> },
    Concat { axis: usize, parts: Vec<usize> },
    Reshape,
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Conv3d { stride: [usize; 3], pad: [usize; 3] },
    MaxPool3d { argmax: Vec<usize> },
    BatchNorm3d { train: bool, xhat: Vec<f64>, rstd: Vec<f64> },
    Mha(Box<MhaCache>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale { .. } => "scalar-scale",
            Op::Relu => "relu",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Softmax => "softmax",
            Op::L2Normalize { .. } => "l2-normalize",
            Op::LayerNorm { .. } => "layernorm",
            Op::Matmul { .. } => "matmul",
            Op::Linear => "linear",
            Op::Embedding { .. } => "embedding-lookup",
            Op::Concat { .. } => "concat",
            Op::Reshape => "reshape",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Conv3d { .. } => "conv3d",
            Op::MaxPool3d { .. } => "maxpool3d",
            Op::BatchNorm3d { .. } => "batchnorm3d",
            Op::Mha(_) => "multihead-attention",
        }
    }
}

pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub data: Rc<Vec<f64>>,
    pub requires_grad: bool,
}

/// Ordered record of primitive applications. Single-threaded; construct one
/// graph per forward/backward pass.
pub struct Graph {
    id: u64,
    pub(crate) nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Gradients accumulate into leaves with
    /// `requires_grad` set.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<DiffTensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(GradError::ShapeMismatch {
                op: "leaf",
                details: format!("shape {:?} does not hold {} values", shape, data.len()),
            });
        }
        check_finite(&data, "leaf")?;
        Ok(self.push(Op::Leaf, vec![], shape.to_vec(), data, requires_grad))
    }

    /// A leaf that never receives a gradient (masks, weights held fixed).
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<DiffTensor> {
        self.leaf(data, shape, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Result<DiffTensor> {
        self.constant(vec![value], &[1])
    }

    /// Attach a detached tensor to this graph as a non-grad leaf; pass
    /// through tensors already attached here.
    pub fn adopt(&mut self, t: &DiffTensor) -> Result<DiffTensor> {
        match t.node {
            Some(_) if t.graph == self.id => Ok(t.clone()),
            Some(_) => Err(GradError::Detached),
            None => {
                let data = t.data.as_ref().clone();
                self.constant(data, &t.shape)
            }
        }
    }

    pub(crate) fn push(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> DiffTensor {
        let id = self.nodes.len();
        let data = Rc::new(data);
        self.nodes.push(Node { op, inputs, shape: shape.clone(), data: Rc::clone(&data), requires_grad });
        DiffTensor { shape, data, graph: self.id, node: Some(id) }
    }

    /// Resolve an input tensor to a node id, adopting detached tensors.
    pub(crate) fn input_id(&mut self, t: &DiffTensor) -> Result<NodeId> {
        match t.node {
            Some(id) if t.graph == self.id => Ok(id),
            Some(_) => Err(GradError::Detached),
            None => {
                let adopted = self.adopt(t)?;
                Ok(adopted.node.expect("adopt attaches"))
            }
        }
    }

    pub(crate) fn any_requires_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub(crate) fn record(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<DiffTensor> {
        check_finite(&data, op.name())?;
        let rg = self.any_requires_grad(&inputs);
        Ok(self.push(op, inputs, shape, data, rg))
    }

    /// Reverse pass from a scalar loss. Visits nodes exactly once, in
    /// reverse topological (= reverse insertion) order, and returns the
    /// accumulated gradient of every `requires_grad` leaf.
    pub fn backward(&mut self, loss: &DiffTensor) -> Result<Gradients> {
        let loss_id = match loss.node {
            Some(id) if loss.graph == self.id => id,
            _ => return Err(GradError::Detached),
        };
        if loss.numel() != 1 {
            return Err(GradError::NonScalarLoss(loss.shape.clone()));
        }
        if self.consumed {
            return Err(GradError::BackwardConsumed);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue; // keep the accumulated gradient for reporting
            }
            let out_grad = grads[id].take().expect("checked above");
            let contributions = self.vjp(id, &out_grad)?;
            let input_ids = self.nodes[id].inputs.clone();
            for (slot, contrib) in input_ids.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                check_finite(&contrib, self.nodes[id].op.name())?;
                match &mut grads[*slot] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    empty => *empty = Some(contrib),
                }
            }
        }

        let mut by_node = vec![None; self.nodes.len()];
        for (id, g) in grads.into_iter().enumerate() {
            if g.is_some() && matches!(self.nodes[id].op, Op::Leaf) && self.nodes[id].requires_grad {
                by_node[id] = g;
            }
        }
        Ok(Gradients { by_node })
    }

    /// Vector-Jacobian product of one node: upstream gradient in, one
    /// optional gradient buffer per input out (None where the input does
    /// not require a gradient).
    fn vjp(&self, id: NodeId, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let node = &self.nodes[id];
        let need: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
        let ins: Vec<&Node> = node.inputs.iter().map(|&i| &self.nodes[i]).collect();
        match &node.op {
            Op::Leaf => unreachable!("leaves are not differentiated"),
            Op::Add => Ok(elementwise::vjp_add(&ins, g, &need)),
            Op::Mul => Ok(elementwise::vjp_mul(&ins, g, &need)),
            Op::Scale { factor } => Ok(vec![opt(need[0], || g.iter().map(|x| x * factor).collect())]),
            Op::Relu => Ok(vec![opt(need[0], || elementwise::vjp_relu(&ins[0].data, g))]),
            Op::Log => Ok(vec![opt(need[0], || {
                ins[0].data.iter().zip(g).map(|(x, gi)| gi / x).collect()
            })]),
            Op::Exp => Ok(vec![opt(need[0], || {
                node.data.iter().zip(g).map(|(y, gi)| gi * y).collect()
            })]),
            Op::Softmax => Ok(vec![opt(need[0], || {
                elementwise::vjp_softmax(&node.data, &node.shape, g)
            })]),
            Op::L2Normalize { norms } => Ok(vec![opt(need[0], || {
                elementwise::vjp_l2_normalize(&node.data, &node.shape, norms, g)
            })]),
            Op::LayerNorm { xhat, rstd } => Ok(elementwise::vjp_layernorm(&ins, xhat, rstd, g, &need)),
            Op::Matmul { ta, tb } => Ok(linalg::vjp_matmul(&ins, *ta, *tb, &node.shape, g, &need)),
            Op::Linear => Ok(linalg::vjp_linear(&ins, g, &need)),
            Op::Embedding { ids } => Ok(linalg::vjp_embedding(&ins, ids, g, &need)),
            Op::Concat { axis, parts } => Ok(linalg::vjp_concat(&ins, *axis, parts, &node.shape, g, &need)),
            Op::Reshape => Ok(vec![opt(need[0], || g.to_vec())]),
            Op::Sum { axis } => Ok(vec![opt(need[0], || {
                linalg::vjp_reduce(&ins[0].shape, *axis, g, false)
            })]),
            Op::Mean { axis } => Ok(vec![opt(need[0], || {
                linalg::vjp_reduce(&ins[0].shape, *axis, g, true)
            })]),
            Op::Conv3d { stride, pad } => Ok(conv::vjp_conv3d(&ins, *stride, *pad, &node.shape, g, &need)),
            Op::MaxPool3d { argmax } => Ok(vec![opt(need[0], || {
                conv::vjp_maxpool3d(&ins[0].shape, argmax, g)
            })]),
            Op::BatchNorm3d { train, xhat, rstd } => {
                Ok(conv::vjp_batchnorm3d(&ins, *train, xhat, rstd, g, &need))
            }
            Op::Mha(cache) => attention::vjp_mha(&ins, cache, g, &need),
        }
    }
}

pub(crate) fn opt(needed: bool, f: impl FnOnce() -> Vec<f64>) -> Option<Vec<f64>> {
    if needed {
        Some(f())
    } else {
        None
    }
}

/// Gradient of every `requires_grad` leaf, keyed by node id.
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, t: &DiffTensor) -> Option<&[f64]> {
        self.by_node.get(t.node?).and_then(|g| g.as_deref())
    }

    /// Zero-filled where a leaf received no gradient at all.
    pub fn wrt_or_zero(&self, t: &DiffTensor) -> Vec<f64> {
        self.wrt(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()])
    }
}

pub(crate) fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GradError::NonFinite(op))
    }
}

/// The primitive vocabulary accepted by [`Graph::eval_primitive`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    Add,
    Mul,
    Matmul,
    Conv3d,
    MaxPool3d,
    BatchNorm3d,
    Relu,
    Linear,
    LayerNorm,
    Softmax,
    Log,
    Exp,
    EmbeddingLookup,
    MultiheadAttention,
    L2Normalize,
    Concat,
    Reshape,
    Mean,
    Sum,
    ScalarScale,
}

impl std::str::FromStr for PrimitiveKind {
    type Err = GradError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Self::Add,
            "mul" => Self::Mul,
            "matmul" => Self::Matmul,
            "conv3d" => Self::Conv3d,
            "maxpool3d" => Self::MaxPool3d,
            "batchnorm3d" => Self::BatchNorm3d,
            "relu" => Self::Relu,
            "linear" => Self::Linear,
            "layernorm" => Self::LayerNorm,
            "softmax" => Self::Softmax,
            "log" => Self::Log,
            "exp" => Self::Exp,
            "embedding-lookup" => Self::EmbeddingLookup,
            "multihead-attention" => Self::MultiheadAttention,
            "l2-normalize" => Self::L2Normalize,
            "concat" => Self::Concat,
            "reshape" => Self::Reshape,
            "mean" => Self::Mean,
            "sum" => Self::Sum,
            "scalar-scale" => Self::ScalarScale,
            other => return Err(GradError::UnknownKind(other.to_string())),
        })
    }
}

/// Attribute map for [`Graph::eval_primitive`]. Each kind reads the fields
/// it needs and rejects calls where they are absent.
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub stride: Option<[usize; 3]>,
    pub pad: Option<[usize; 3]>,
    pub pool_size: Option<[usize; 3]>,
    pub axis: Option<usize>,
    pub full_reduce: bool,
    pub shape: Option<Vec<usize>>,
    pub ids: Option<Vec<usize>>,
    pub heads: Option<usize>,
    pub causal: bool,
    pub key_valid: Option<Vec<bool>>,
    pub factor: Option<f64>,
    pub train: Option<bool>,
    pub running_mean: Option<Vec<f64>>,
    pub running_var: Option<Vec<f64>>,
    pub transpose_a: bool,
    pub transpose_b: bool,
}

impl Graph {
    /// Uniform string-keyed entry point over the typed primitive methods.
    /// The typed methods are the native surface; this one exists for
    /// callers that carry the kind as data (bindings, dispatch tables).
    pub fn eval_primitive(
        &mut self,
        kind: &str,
        inputs: &[&DiffTensor],
        attrs: &Attrs,
    ) -> Result<DiffTensor> {
        let kind: PrimitiveKind = kind.parse()?;
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(GradError::ShapeMismatch {
                    op: "eval_primitive",
                    details: format!("kind takes {} inputs, got {}", n, inputs.len()),
                })
            }
        };
        match kind {
            PrimitiveKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            PrimitiveKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            PrimitiveKind::Matmul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1], attrs.transpose_a, attrs.transpose_b)
            }
            PrimitiveKind::Conv3d => {
                arity(3)?;
                let stride = attrs.stride.ok_or(GradError::BadAttr { op: "conv3d", attr: "stride" })?;
                let pad = attrs.pad.ok_or(GradError::BadAttr { op: "conv3d", attr: "pad" })?;
                self.conv3d(inputs[0], inputs[1], inputs[2], stride, pad)
            }
            PrimitiveKind::MaxPool3d => {
                arity(1)?;
                let size = attrs.pool_size.ok_or(GradError::BadAttr { op: "maxpool3d", attr: "pool_size" })?;
                let stride = attrs.stride.ok_or(GradError::BadAttr { op: "maxpool3d", attr: "stride" })?;
                self.maxpool3d(inputs[0], size, stride)
            }
            PrimitiveKind::BatchNorm3d => {
                arity(3)?;
                let train = attrs.train.ok_or(GradError::BadAttr { op: "batchnorm3d", attr: "train" })?;
                if train {
                    Ok(self.batchnorm3d_train(inputs[0], inputs[1], inputs[2])?.0)
                } else {
                    let rm = attrs
                        .running_mean
                        .as_deref()
                        .ok_or(GradError::BadAttr { op: "batchnorm3d", attr: "running_mean" })?;
                    let rv = attrs
                        .running_var
                        .as_deref()
                        .ok_or(GradError::BadAttr { op: "batchnorm3d", attr: "running_var" })?;
                    self.batchnorm3d_eval(inputs[0], inputs[1], inputs[2], rm, rv)
                }
            }
            PrimitiveKind::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            PrimitiveKind::Linear => {
                arity(3)?;
                self.linear(inputs[0], inputs[1], inputs[2])
            }
            PrimitiveKind::LayerNorm => {
                arity(3)?;
                self.layernorm(inputs[0], inputs[1], inputs[2])
            }
            PrimitiveKind::Softmax => {
                arity(1)?;
                self.softmax(inputs[0])
            }
            PrimitiveKind::Log => {
                arity(1)?;
                self.log(inputs[0])
            }
            PrimitiveKind::Exp => {
                arity(1)?;
                self.exp(inputs[0])
            }
            PrimitiveKind::EmbeddingLookup => {
                arity(1)?;
                let ids = attrs.ids.as_deref().ok_or(GradError::BadAttr { op: "embedding-lookup", attr: "ids" })?;
                self.embedding(inputs[0], ids)
            }
            PrimitiveKind::MultiheadAttention => {
                arity(9)?;
                let heads = attrs.heads.ok_or(GradError::BadAttr { op: "multihead-attention", attr: "heads" })?;
                let kv;
                let key_valid = match &attrs.key_valid {
                    Some(v) => v.as_slice(),
                    None => {
                        kv = vec![true; inputs[0].shape().first().copied().unwrap_or(0)];
                        kv.as_slice()
                    }
                };
                self.multihead_attention(
                    inputs[0],
                    [inputs[1], inputs[2], inputs[3], inputs[4], inputs[5], inputs[6], inputs[7], inputs[8]],
                    heads,
                    attrs.causal,
                    key_valid,
                )
            }
            PrimitiveKind::L2Normalize => {
                arity(1)?;
                self.l2_normalize(inputs[0])
            }
            PrimitiveKind::Concat => {
                let axis = attrs.axis.ok_or(GradError::BadAttr { op: "concat", attr: "axis" })?;
                self.concat(inputs, axis)
            }
            PrimitiveKind::Reshape => {
                arity(1)?;
                let shape = attrs.shape.as_deref().ok_or(GradError::BadAttr { op: "reshape", attr: "shape" })?;
                self.reshape(inputs[0], shape)
            }
            PrimitiveKind::Mean => {
                arity(1)?;
                let axis = if attrs.full_reduce { None } else { attrs.axis };
                self.mean(inputs[0], axis)
            }
            PrimitiveKind::Sum => {
                arity(1)?;
                let axis = if attrs.full_reduce { None } else { attrs.axis };
                self.sum(inputs[0], axis)
            }
            PrimitiveKind::ScalarScale => {
                arity(1)?;
                let factor = attrs.factor.ok_or(GradError::BadAttr { op: "scalar-scale", attr: "factor" })?;
                self.scale(inputs[0], factor)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= tol, "got {:?}, want {:?}", got, want);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.leaf(vec![-1.0, 0.0, 2.0], &[3], false).unwrap();
        let y = g.relu(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.0, 0.0], &[2], false).unwrap();
        let y = g.softmax(&x).unwrap();
        assert_close(y.data(), &[0.5, 0.5], 1e-15);
    }

    #[test]
    fn conv3d_identity_kernel_passes_input_through() {
        let mut g = Graph::new();
        let x = g.leaf((0..24).map(|v| v as f64 * 0.1).collect(), &[1, 1, 2, 3, 4], false).unwrap();
        let w = g.leaf(vec![1.0], &[1, 1, 1, 1, 1], false).unwrap();
        let b = g.leaf(vec![0.0], &[1], false).unwrap();
        let y = g.conv3d(&x, &w, &b, [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_close(y.data(), x.data(), 0.0);
    }

    #[test]
    fn layernorm_of_constant_vector_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(vec![5.0, 5.0, 5.0], &[3], false).unwrap();
        let gamma = g.leaf(vec![1.0; 3], &[3], false).unwrap();
        let beta = g.leaf(vec![0.0; 3], &[3], false).unwrap();
        let y = g.layernorm(&x, &gamma, &beta).unwrap();
        assert_close(y.data(), &[0.0, 0.0, 0.0], 1e-12);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(vec![3.0], &[1], true).unwrap();
        let sq = g.mul(&x, &x).unwrap();
        let loss = g.sum(&sq, None).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_close(grads.wrt(&x).unwrap(), &[6.0], 1e-15);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(vec![-1.0, 2.0, 0.0], &[3], true).unwrap();
        let y = g.relu(&x).unwrap();
        let loss = g.sum(&y, None).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_close(grads.wrt(&x).unwrap(), &[0.0, 1.0, 0.0], 0.0);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        // loss = -sum(onehot * log softmax(z))
        let logits = vec![0.3, -1.2, 0.8, 0.1];
        let onehot = vec![0.0, 0.0, 1.0, 0.0];
        let build = |g: &mut Graph, z: &DiffTensor| {
            let oh = g.constant(onehot.clone(), &[4])?;
            let p = g.softmax(z)?;
            let lp = g.log(&p)?;
            let picked = g.mul(&lp, &oh)?;
            let s = g.sum(&picked, None)?;
            g.scale(&s, -1.0)
        };
        let mut g = Graph::new();
        let z = g.leaf(logits.clone(), &[4], true).unwrap();
        let loss = build(&mut g, &z).unwrap();
        let grads = g.backward(&loss).unwrap();

        let mut gg = Graph::new();
        let z2 = gg.leaf(logits.clone(), &[4], false).unwrap();
        let probs = gg.softmax(&z2).unwrap();
        let expected: Vec<f64> = probs.data().iter().zip(&onehot).map(|(p, o)| p - o).collect();
        assert_close(grads.wrt(&z).unwrap(), &expected, 1e-12);

        let err = finite_diff_check(build, &logits, &[4], 1e-3).unwrap();
        assert!(err < 1e-4, "finite-difference error {}", err);
    }

    #[test]
    fn finite_diff_on_square_and_affine() {
        let square = |g: &mut Graph, x: &DiffTensor| {
            let sq = g.mul(x, x)?;
            g.sum(&sq, None)
        };
        let err = finite_diff_check(square, &[3.0], &[1], 1e-3).unwrap();
        assert!(err < 1e-9, "square error {}", err);

        let affine = |g: &mut Graph, x: &DiffTensor| {
            let w = g.constant(vec![2.0, -0.5, 1.5], &[3])?;
            let p = g.mul(x, &w)?;
            g.sum(&p, None)
        };
        let err = finite_diff_check(affine, &[0.4, -1.0, 2.0], &[3], 1e-3).unwrap();
        assert!(err < 1e-12, "affine error {}", err);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let x0 = vec![0.5, -0.3, 1.1, 0.2];
        let part_a = |g: &mut Graph, x: &DiffTensor| {
            let y = g.relu(x)?;
            g.sum(&y, None)
        };
        let part_b = |g: &mut Graph, x: &DiffTensor| {
            let y = g.mul(x, x)?;
            g.mean(&y, None)
        };
        let grad_of = |f: &dyn Fn(&mut Graph, &DiffTensor) -> Result<DiffTensor>| {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone(), &[4], true).unwrap();
            let loss = f(&mut g, &x).unwrap();
            g.backward(&loss).unwrap().wrt_or_zero(&x)
        };
        let ga = grad_of(&part_a);
        let gb = grad_of(&part_b);
        let gsum = {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone(), &[4], true).unwrap();
            let la = part_a(&mut g, &x).unwrap();
            let lb = part_b(&mut g, &x).unwrap();
            let loss = g.add(&la, &lb).unwrap();
            g.backward(&loss).unwrap().wrt_or_zero(&x)
        };
        let want: Vec<f64> = ga.iter().zip(&gb).map(|(a, b)| a + b).collect();
        assert_close(&gsum, &want, 1e-12);
    }

    #[test]
    fn maxpool_ties_route_to_lowest_flat_index() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0; 8], &[1, 1, 2, 2, 2], true).unwrap();
        let y = g.maxpool3d(&x, [2, 2, 2], [2, 2, 2]).unwrap();
        let loss = g.sum(&y, None).unwrap();
        let grads = g.backward(&loss).unwrap();
        let dx = grads.wrt(&x).unwrap();
        assert_eq!(dx, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn batchnorm_eval_is_a_fixed_affine_map() {
        let rm = vec![0.2, -0.1];
        let rv = vec![1.5, 0.7];
        let xv: Vec<f64> = (0..16).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone(), &[1, 2, 2, 2, 2], false).unwrap();
            let ga = g.leaf(vec![1.3, 0.8], &[2], false).unwrap();
            let be = g.leaf(vec![0.1, -0.4], &[2], false).unwrap();
            g.batchnorm3d_eval(&x, &ga, &be, &rm, &rv).unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        // affine per channel: y = gamma * (x - m) / sqrt(v + eps) + beta
        let want0 = 1.3 * (xv[0] - 0.2) / (1.5f64 + 1e-5).sqrt() + 0.1;
        assert!((a[0] - want0).abs() < 1e-12);
    }

    #[test]
    fn repeated_backward_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0], &[1], true).unwrap();
        let loss = g.mul(&x, &x).unwrap();
        g.backward(&loss).unwrap();
        assert!(matches!(g.backward(&loss), Err(GradError::BackwardConsumed)));
    }

    #[test]
    fn non_scalar_loss_and_detached_are_errors() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let y = g.relu(&x).unwrap();
        assert!(matches!(g.backward(&y), Err(GradError::NonScalarLoss(_))));

        let detached = DiffTensor::detached(vec![1.0], &[1]).unwrap();
        assert!(matches!(g.backward(&detached), Err(GradError::Detached)));
    }

    #[test]
    fn eval_primitive_rejects_unknown_kind() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0], &[1], false).unwrap();
        let err = g.eval_primitive("transmogrify", &[&x], &Attrs::default()).unwrap_err();
        assert!(matches!(err, GradError::UnknownKind(k) if k == "transmogrify"));
    }

    #[test]
    fn eval_primitive_matches_typed_surface() {
        let mut g = Graph::new();
        let x = g.leaf(vec![-1.0, 0.5], &[2], false).unwrap();
        let via_str = g.eval_primitive("relu", &[&x], &Attrs::default()).unwrap();
        let via_typed = g.relu(&x).unwrap();
        assert_eq!(via_str.data(), via_typed.data());
    }

    #[test]
    fn add_shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, 2.0], &[2], false).unwrap();
        let b = g.leaf(vec![1.0, 2.0, 3.0], &[3], false).unwrap();
        assert!(matches!(g.add(&a, &b), Err(GradError::ShapeMismatch { .. })));
    }

    #[test]
    fn log_of_zero_is_a_nonfinite_error() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.0], &[1], false).unwrap();
        assert!(matches!(g.log(&x), Err(GradError::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            xs in proptest::collection::vec(-30.0f64..30.0, 2..24),
            c in -10.0f64..10.0,
        ) {
            let n = xs.len();
            let mut g = Graph::new();
            let x = g.leaf(xs.clone(), &[n], false).unwrap();
            let y = g.softmax(&x).unwrap();
            let total: f64 = y.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);

            let shifted: Vec<f64> = xs.iter().map(|v| v + c).collect();
            let xs2 = g.leaf(shifted, &[n], false).unwrap();
            let y2 = g.softmax(&xs2).unwrap();
            for (a, b) in y.data().iter().zip(y2.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn l2_normalize_yields_unit_rows(
            xs in proptest::collection::vec(-5.0f64..5.0, 3..30),
        ) {
            prop_assume!(xs.iter().any(|v| v.abs() > 1e-6));
            let n = xs.len();
            let mut g = Graph::new();
            let x = g.leaf(xs, &[n], false).unwrap();
            let y = g.l2_normalize(&x).unwrap();
            let norm: f64 = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}
