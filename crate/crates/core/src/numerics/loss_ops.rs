use super::elementwise::sigmoid;
use super::graph::{Graph, Op, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

impl Graph {
    /// Per-row cross-entropy of `logits[n, C]` against class indices; returns `[n]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return Err(shape_err!("cross_entropy: {} targets for {:?}", targets.len(), lv.shape()));
        }
        let mut probs = lv.data().to_vec();
        super::elementwise::softmax_rows(&mut probs, c, 1.0);
        let mut out = Vec::with_capacity(n);
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            out.push(lse - row[t]);
        }
        self.push(Tensor::new([n], out)?, Op::CrossEntropy { logits, targets, probs }, &[logits])
    }

    /// Element-wise binary cross-entropy on logits; returns the shape of `logits`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f32>) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.len() {
            return Err(shape_err!("bce: {} targets for {:?}", targets.len(), lv.shape()));
        }
        let out = lv
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .collect();
        let t = Tensor::new(lv.shape(), out)?;
        self.push(t, Op::BceLogits { logits, targets }, &[logits])
    }

    /// Element-wise `min(|pred − target|, clip)`.
    pub fn l1_clipped(&mut self, pred: Var, target: Vec<f32>, clip: f32) -> Result<Var> {
        let pv = self.value(pred);
        if target.len() != pv.len() {
            return Err(shape_err!("l1: {} targets for {:?}", target.len(), pv.shape()));
        }
        let out = pv.data().iter().zip(&target).map(|(p, t)| (p - t).abs().min(clip)).collect();
        let t = Tensor::new(pv.shape(), out)?;
        self.push(t, Op::L1Clipped { pred, target, clip }, &[pred])
    }
}

pub(super) fn cross_entropy_backward(
    g: &Graph,
    logits: Var,
    targets: &[usize],
    probs: &[f32],
    gout: &[f32],
    grads: &mut [Option<Vec<f32>>],
) {
    let c = g.value(logits).cols();
    if let Some(gl) = g.acc(grads, logits) {
        for (r, &t) in targets.iter().enumerate() {
            for j in 0..c {
                let onehot = if j == t { 1.0 } else { 0.0 };
                gl[r * c + j] += gout[r] * (probs[r * c + j] - onehot);
            }
        }
    }
}

pub(super) fn bce_backward(g: &Graph, logits: Var, targets: &[f32], gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let lv = g.data(logits);
    if let Some(gl) = g.acc(grads, logits) {
        for i in 0..gl.len() {
            gl[i] += gout[i] * (sigmoid(lv[i]) - targets[i]);
        }
    }
}

pub(super) fn l1_backward(g: &Graph, pred: Var, target: &[f32], clip: f32, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let pv = g.data(pred);
    if let Some(gp) = g.acc(grads, pred) {
        for i in 0..gp.len() {
            let d = pv[i] - target[i];
            if d.abs() < clip && d != 0.0 {
                gp[i] += gout[i] * d.signum();
            }
        }
    }
}
