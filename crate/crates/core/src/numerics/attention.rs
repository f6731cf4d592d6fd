use super::graph::{Graph, Op, Var};
use super::linalg::{gemm, Mat};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

#[derive(Debug)]
pub(crate) struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    groups: usize,
    nq: usize,
    nk: usize,
    dim: usize,
    heads: usize,
    pub(crate) probs: Vec<f32>,
}

fn strided(data: &[f32], off: usize, rs: usize, cs: usize) -> Mat<'_> {
    Mat { data: &data[off..], rs, cs }
}

impl Graph {
    /// Multi-head scaled dot-product attention over `groups` independent
    /// problems: `q[G, nq, D]`, `k`/`v[G, nk, D]` (a 2-D `q[nq, D]` means
    /// `G = 1`). `keep[G * nk]` masks keys out with `false`. A group whose
    /// keys are all masked outputs zeros and is flagged in the returned vector.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, keep: Option<&[bool]>, heads: usize) -> Result<(Var, Vec<bool>)> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        if self.shape(v) != ks.as_slice() {
            return Err(shape_err!("attention: k {:?} vs v {:?}", ks, self.shape(v)));
        }
        let (groups, nq, dim) = match qs.as_slice() {
            [nq, d] => (1, *nq, *d),
            [g, nq, d] => (*g, *nq, *d),
            _ => return Err(shape_err!("attention: q must be 2-D or 3-D, got {:?}", qs)),
        };
        let (kg, nk, kd) = match ks.as_slice() {
            [nk, d] => (1, *nk, *d),
            [g, nk, d] => (*g, *nk, *d),
            _ => return Err(shape_err!("attention: k must be 2-D or 3-D, got {:?}", ks)),
        };
        if kg != groups || kd != dim {
            return Err(shape_err!("attention: q {:?} vs k {:?}", qs, ks));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(shape_err!("attention: dim {} not divisible by {} heads", dim, heads));
        }
        if let Some(m) = keep {
            if m.len() != groups * nk {
                return Err(shape_err!("attention: mask length {} for {} keys", m.len(), groups * nk));
            }
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0f32; groups * heads * nq * nk];
        let mut out = vec![0.0f32; groups * nq * dim];
        let mut fallback = vec![false; groups];
        for gi in 0..groups {
            let gkeep = keep.map(|m| &m[gi * nk..(gi + 1) * nk]);
            if nk == 0 || gkeep.is_some_and(|m| !m.iter().any(|&b| b)) {
                fallback[gi] = true;
                continue;
            }
            for h in 0..heads {
                let qo = gi * nq * dim + h * dh;
                let ko = gi * nk * dim + h * dh;
                let p = &mut probs[(gi * heads + h) * nq * nk..(gi * heads + h + 1) * nq * nk];
                gemm(nq, dh, nk, strided(qd, qo, dim, 1), strided(kd, ko, 1, dim), p, nk, false);
                for row in p.chunks_mut(nk) {
                    let mut max = f32::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        *s *= scale;
                        if gkeep.is_none_or(|m| m[j]) {
                            max = max.max(*s);
                        }
                    }
                    let mut sum = 0.0f64;
                    for (j, s) in row.iter_mut().enumerate() {
                        if gkeep.is_none_or(|m| m[j]) {
                            *s = (*s - max).exp();
                            sum += *s as f64;
                        } else {
                            *s = 0.0;
                        }
                    }
                    let inv = (1.0 / sum) as f32;
                    row.iter_mut().for_each(|s| *s *= inv);
                }
                gemm(nq, nk, dh, Mat::rows(p, nk), strided(vd, ko, dim, 1), &mut out[qo..], dim, false);
            }
        }
        let t = Tensor::new(qs.clone(), out)?;
        let saved = AttentionSaved { q, k, v, groups, nq, nk, dim, heads, probs };
        let var = self.push(t, Op::Attention(Box::new(saved)), &[q, k, v])?;
        Ok((var, fallback))
    }

    /// Attention probabilities of a recorded attention node, `[G, heads, nq, nk]`.
    pub fn attention_probs(&self, var: Var) -> Option<&[f32]> {
        match &self.nodes[var.0].op {
            Op::Attention(s) => Some(&s.probs),
            _ => None,
        }
    }
}

pub(super) fn backward(g: &Graph, s: &AttentionSaved, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let AttentionSaved { q, k, v, groups, nq, nk, dim, heads, ref probs } = *s;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let (qd, kd, vd) = (g.data(q), g.data(k), g.data(v));
    // dS for every group/head; masked entries have zero probability and stay zero.
    let mut ds = vec![0.0f32; probs.len()];
    for gi in 0..groups {
        for h in 0..heads {
            let base = (gi * heads + h) * nq * nk;
            let p = &probs[base..base + nq * nk];
            let d = &mut ds[base..base + nq * nk];
            let go = gi * nq * dim + h * dh;
            let ko = gi * nk * dim + h * dh;
            gemm(nq, dh, nk, strided(gout, go, dim, 1), strided(vd, ko, 1, dim), d, nk, false);
            for (drow, prow) in d.chunks_mut(nk).zip(p.chunks(nk)) {
                let dot: f32 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for j in 0..nk {
                    drow[j] = prow[j] * (drow[j] - dot) * scale;
                }
            }
        }
    }
    if let Some(gq) = g.acc(grads, q) {
        for gi in 0..groups {
            for h in 0..heads {
                let base = (gi * heads + h) * nq * nk;
                let qo = gi * nq * dim + h * dh;
                let ko = gi * nk * dim + h * dh;
                gemm(nq, nk, dh, Mat::rows(&ds[base..], nk), strided(kd, ko, dim, 1), &mut gq[qo..], dim, true);
            }
        }
    }
    if let Some(gk) = g.acc(grads, k) {
        for gi in 0..groups {
            for h in 0..heads {
                let base = (gi * heads + h) * nq * nk;
                let qo = gi * nq * dim + h * dh;
                let ko = gi * nk * dim + h * dh;
                gemm(nk, nq, dh, Mat::t(&ds[base..], nk), strided(qd, qo, dim, 1), &mut gk[ko..], dim, true);
            }
        }
    }
    if let Some(gv) = g.acc(grads, v) {
        for gi in 0..groups {
            for h in 0..heads {
                let base = (gi * heads + h) * nq * nk;
                let go = gi * nq * dim + h * dh;
                let ko = gi * nk * dim + h * dh;
                gemm(nk, nq, dh, Mat::t(&probs[base..], nk), strided(gout, go, dim, 1), &mut gv[ko..], dim, true);
            }
        }
    }
}
