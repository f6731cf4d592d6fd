use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Recorded operation; the payload holds what the backward pass needs.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddBias { x: Var, b: Var },
    ScaleBy { x: Var, s: Var },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax { x: Var, temperature: f32 },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<f32> },
    Attention(Box<super::attention::AttentionSaved>),
    Bilinear { map: Var, points: Var },
    UpsampleNearest { x: Var, factor: usize },
    UpsampleBilinear { x: Var, factor: usize },
    Gather { x: Var, index: Vec<usize> },
    GatherMulti { sources: Vec<Var>, index: Vec<Option<(usize, usize)>> },
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceLast { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    Im2Col { x: Var, geom: super::conv::ConvGeom },
    NormalizeRows { x: Var, inv_norms: Vec<f32> },
    SumAll(Var),
    DotConst { x: Var, w: Vec<f32> },
    WeightedSum { w: Var, x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
    BceLogits { logits: Var, targets: Vec<f32> },
    L1Clipped { pred: Var, target: Vec<f32>, clip: f32 },
}

pub(crate) struct Node {
    pub value: Arc<Tensor>,
    pub op: Op,
    pub needs_grad: bool,
}

/// Reverse-mode tape. Every op validates shapes, computes eagerly and
/// records itself; [`Graph::backward`] walks the tape in reverse.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    transient_floats: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_vars: HashMap::new(), transient_floats: 0 }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite output from {}", op_name(&op))));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.transient_floats += value.len() + saved_floats(&op);
        let id = self.nodes.len();
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Ok(Var(id))
    }

    /// Input that gradients may be requested for.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite leaf".into()));
        }
        self.transient_floats += value.len();
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(Var(id))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Parameter leaf; shares storage with the store and is inserted once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let var = Var(self.nodes.len());
        self.nodes.push(Node {
            value: Arc::clone(&p.tensor),
            op: Op::Leaf,
            needs_grad: p.trainable,
        });
        self.param_vars.insert(id, var);
        var
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floats held by non-parameter nodes, including saved backward buffers.
    pub fn transient_floats(&self) -> usize {
        self.transient_floats
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop(i, &gout, &mut grads);
        }
        let param_vars = self
            .param_vars
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(&p, &v)| (p, v))
            .collect();
        Ok(Gradients { grads, param_vars })
    }

    /// Gradient buffer for `v`, allocated on first use; `None` if `v` needs no gradient.
    pub(crate) fn acc<'a>(&self, grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(&self, i: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        use super::{attention, conv, elementwise as ew, linalg, loss_ops, sampling};
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => linalg::affine_backward(self, *x, *w, *b, gout, grads),
            Op::MatMul { a, b, trans_b } => linalg::matmul_backward(self, *a, *b, *trans_b, gout, grads),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.acc(grads, v) {
                        add_into(g, gout);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    add_into(g, gout);
                }
                if let Some(g) = self.acc(grads, *b) {
                    g.iter_mut().zip(gout).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Mul(a, b) => ew::mul_backward(self, *a, *b, gout, grads),
            Op::Scale(x, c) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(gout).for_each(|(g, d)| *g += c * d);
                }
            }
            Op::AddBias { x, b } => ew::add_bias_backward(self, *x, *b, gout, grads),
            Op::ScaleBy { x, s } => ew::scale_by_backward(self, *x, *s, gout, grads),
            Op::Gelu(x) => ew::unary_backward(self, *x, out, gout, grads, ew::Unary::Gelu),
            Op::Tanh(x) => ew::unary_backward(self, *x, out, gout, grads, ew::Unary::Tanh),
            Op::Sigmoid(x) => ew::unary_backward(self, *x, out, gout, grads, ew::Unary::Sigmoid),
            Op::Relu(x) => ew::unary_backward(self, *x, out, gout, grads, ew::Unary::Relu),
            Op::Softmax { x, temperature } => ew::softmax_backward(self, *x, *temperature, out, gout, grads),
            Op::LayerNorm { x, gamma, beta, stats } => {
                ew::layer_norm_backward(self, *x, *gamma, *beta, stats, gout, grads)
            }
            Op::Attention(saved) => attention::backward(self, saved, gout, grads),
            Op::Bilinear { map, points } => sampling::bilinear_backward(self, *map, *points, gout, grads),
            Op::UpsampleNearest { x, factor } => sampling::upsample_nearest_backward(self, *x, *factor, gout, grads),
            Op::UpsampleBilinear { x, factor } => {
                sampling::upsample_bilinear_backward(self, *x, *factor, gout, grads)
            }
            Op::Gather { x, index } => sampling::gather_backward(self, *x, index, gout, grads),
            Op::GatherMulti { sources, index } => sampling::gather_multi_backward(self, sources, index, gout, grads),
            Op::ConcatLast(parts) => linalg::concat_last_backward(self, parts, gout, grads),
            Op::ConcatRows(parts) => linalg::concat_rows_backward(self, parts, gout, grads),
            Op::SliceLast { x, start } => linalg::slice_last_backward(self, *x, *start, out, gout, grads),
            Op::SliceRows { x, start } => linalg::slice_rows_backward(self, *x, *start, gout, grads),
            Op::Reshape(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    add_into(g, gout);
                }
            }
            Op::Transpose(x) => linalg::transpose_backward(self, *x, gout, grads),
            Op::Im2Col { x, geom } => conv::im2col_backward(self, *x, geom, gout, grads),
            Op::NormalizeRows { x, inv_norms } => ew::normalize_rows_backward(self, *x, inv_norms, out, gout, grads),
            Op::SumAll(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            Op::DotConst { x, w } => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(w).for_each(|(g, w)| *g += w * gout[0]);
                }
            }
            Op::WeightedSum { w, x } => linalg::weighted_sum_backward(self, *w, *x, gout, grads),
            Op::CrossEntropy { logits, targets, probs } => {
                loss_ops::cross_entropy_backward(self, *logits, targets, probs, gout, grads)
            }
            Op::BceLogits { logits, targets } => loss_ops::bce_backward(self, *logits, targets, gout, grads),
            Op::L1Clipped { pred, target, clip } => loss_ops::l1_backward(self, *pred, target, *clip, gout, grads),
        }
    }
}

pub(crate) fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn saved_floats(op: &Op) -> usize {
    match op {
        Op::LayerNorm { stats, .. } => stats.len(),
        Op::Attention(s) => s.probs.len(),
        Op::NormalizeRows { inv_norms, .. } => inv_norms.len(),
        Op::CrossEntropy { probs, .. } => probs.len(),
        _ => 0,
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Affine { .. } => "affine",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddBias { .. } => "add_bias",
        Op::ScaleBy { .. } => "scale_by",
        Op::Gelu(_) => "gelu",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::Relu(_) => "relu",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Attention(_) => "attention",
        Op::Bilinear { .. } => "bilinear_sample",
        Op::UpsampleNearest { .. } => "upsample_nearest",
        Op::UpsampleBilinear { .. } => "upsample_bilinear",
        Op::Gather { .. } => "gather",
        Op::GatherMulti { .. } => "gather_multi",
        Op::ConcatLast(_) => "concat_last",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceLast { .. } => "slice_last",
        Op::SliceRows { .. } => "slice_rows",
        Op::Reshape(_) => "reshape",
        Op::Transpose(_) => "transpose",
        Op::Im2Col { .. } => "im2col",
        Op::NormalizeRows { .. } => "normalize_rows",
        Op::SumAll(_) => "sum_all",
        Op::DotConst { .. } => "dot_const",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::BceLogits { .. } => "bce_with_logits",
        Op::L1Clipped { .. } => "l1_clipped",
    }
}

/// Result of [`Graph::backward`]: gradients for every leaf that requires one.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    param_vars: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients, in parameter order.
    pub fn params(&self) -> Vec<(ParamId, &[f32])> {
        let mut out: Vec<_> = self
            .param_vars
            .iter()
            .filter_map(|&(p, v)| self.get(v).map(|g| (p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}
