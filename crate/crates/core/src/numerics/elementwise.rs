use super::graph::{Graph, Op, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[derive(Clone, Copy)]
pub(super) enum Unary {
    Gelu,
    Tanh,
    Sigmoid,
    Relu,
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn fast_tanh(z: f32) -> f32 {
    1.0 - 2.0 / (1.0 + (2.0 * z).exp())
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f32) -> f32 {
    let t = fast_tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Graph {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape(), v.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let t = self.map(x, |v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    /// Adds `b[n]` to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(shape_err!("add_bias: {:?} + {:?}", xv.shape(), bv.shape()));
        }
        let n = bv.len();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(r, b)| *r += b);
        }
        let t = Tensor::new(xv.shape(), data)?;
        self.push(t, Op::AddBias { x, b }, &[x, b])
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err!("scale_by: scale must hold one value, got {:?}", self.shape(s)));
        }
        let c = self.data(s)[0];
        let t = self.map(x, |v| v * c);
        self.push(t, Op::ScaleBy { x, s }, &[x, s])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, f32::tanh);
        self.push(t, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    /// `softmax(x / temperature)` along the last axis.
    pub fn softmax(&mut self, x: Var, temperature: f32) -> Result<Var> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::Param(format!("softmax temperature must be > 0, got {temperature}")));
        }
        let v = self.value(x);
        let mut data = v.data().to_vec();
        softmax_rows(&mut data, v.cols(), temperature);
        let t = Tensor::new(v.shape(), data)?;
        self.push(t, Op::Softmax { x, temperature }, &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f32 = 1e-5;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.cols();
        if gv.len() != n || bv.len() != n {
            return Err(shape_err!("layer_norm: x {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()));
        }
        let mut out = vec![0.0; xv.len()];
        let mut stats = Vec::with_capacity(2 * xv.rows());
        for (r, row) in xv.data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let rstd = 1.0 / (var + EPS).sqrt();
            for j in 0..n {
                out[r * n + j] = (row[j] - mean) * rstd * gv.data()[j] + bv.data()[j];
            }
            stats.push(mean);
            stats.push(rstd);
        }
        let t = Tensor::new(xv.shape(), out)?;
        self.push(t, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    /// Scales each row of the last axis to unit L2 norm. Rows whose norm is
    /// below `1e-12` are a numeric error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = v.cols();
        let mut out = v.data().to_vec();
        let mut inv_norms = Vec::with_capacity(v.rows());
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|a| a * a).sum::<f32>().sqrt();
            if !(norm > 1e-12) {
                return Err(Error::Numeric("cannot normalize a zero-norm vector".into()));
            }
            let inv = 1.0 / norm;
            row.iter_mut().for_each(|a| *a *= inv);
            inv_norms.push(inv);
        }
        let t = Tensor::new(v.shape(), out)?;
        self.push(t, Op::NormalizeRows { x, inv_norms }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// `Σ_i w_i · x_i` against constant weights.
    pub fn dot_const(&mut self, x: Var, w: Vec<f32>) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return Err(shape_err!("dot_const: {} weights for {:?}", w.len(), self.shape(x)));
        }
        let s = self.data(x).iter().zip(&w).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32;
        self.push(Tensor::scalar(s), Op::DotConst { x, w }, &[x])
    }
}

pub(crate) fn softmax_rows(data: &mut [f32], n: usize, temperature: f32) {
    for row in data.chunks_mut(n) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            sum += *v as f64;
        }
        let inv = (1.0 / sum) as f32;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

pub(super) fn mul_backward(g: &Graph, a: Var, b: Var, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let (av, bv) = (g.value(a).data(), g.value(b).data());
    if let Some(ga) = g.acc(grads, a) {
        for i in 0..ga.len() {
            ga[i] += gout[i] * bv[i];
        }
    }
    if let Some(gb) = g.acc(grads, b) {
        for i in 0..gb.len() {
            gb[i] += gout[i] * av[i];
        }
    }
}

pub(super) fn add_bias_backward(g: &Graph, x: Var, b: Var, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    if let Some(gx) = g.acc(grads, x) {
        gx.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
    }
    let n = g.value(b).len();
    if let Some(gb) = g.acc(grads, b) {
        for row in gout.chunks(n) {
            gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
    }
}

pub(super) fn scale_by_backward(g: &Graph, x: Var, s: Var, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let c = g.data(s)[0];
    if let Some(gx) = g.acc(grads, x) {
        gx.iter_mut().zip(gout).for_each(|(g, d)| *g += c * d);
    }
    let xv = g.data(x);
    if let Some(gs) = g.acc(grads, s) {
        gs[0] += xv.iter().zip(gout).map(|(a, b)| a * b).sum::<f32>();
    }
}

pub(super) fn unary_backward(g: &Graph, x: Var, out: &Tensor, gout: &[f32], grads: &mut [Option<Vec<f32>>], kind: Unary) {
    let xv = g.data(x);
    let y = out.data();
    if let Some(gx) = g.acc(grads, x) {
        for i in 0..gx.len() {
            let d = match kind {
                Unary::Gelu => gelu_grad(xv[i]),
                Unary::Tanh => 1.0 - y[i] * y[i],
                Unary::Sigmoid => y[i] * (1.0 - y[i]),
                Unary::Relu => {
                    if xv[i] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            gx[i] += gout[i] * d;
        }
    }
}

pub(super) fn softmax_backward(
    g: &Graph,
    x: Var,
    temperature: f32,
    out: &Tensor,
    gout: &[f32],
    grads: &mut [Option<Vec<f32>>],
) {
    let n = out.cols();
    if let Some(gx) = g.acc(grads, x) {
        for ((gxr, yr), gr) in gx.chunks_mut(n).zip(out.data().chunks(n)).zip(gout.chunks(n)) {
            let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for j in 0..n {
                gxr[j] += yr[j] * (gr[j] - dot) / temperature;
            }
        }
    }
}

pub(super) fn layer_norm_backward(
    g: &Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &[f32],
    gout: &[f32],
    grads: &mut [Option<Vec<f32>>],
) {
    let xv = g.value(x);
    let gv = g.data(gamma);
    let n = xv.cols();
    let rows = xv.rows();
    let xhat = |r: usize, j: usize| (xv.data()[r * n + j] - stats[2 * r]) * stats[2 * r + 1];
    if let Some(gg) = g.acc(grads, gamma) {
        for r in 0..rows {
            for j in 0..n {
                gg[j] += gout[r * n + j] * xhat(r, j);
            }
        }
    }
    if let Some(gb) = g.acc(grads, beta) {
        for r in 0..rows {
            for j in 0..n {
                gb[j] += gout[r * n + j];
            }
        }
    }
    if let Some(gx) = g.acc(grads, x) {
        let mut dxhat = vec![0.0; n];
        for r in 0..rows {
            let rstd = stats[2 * r + 1];
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..n {
                dxhat[j] = gout[r * n + j] * gv[j];
                m1 += dxhat[j];
                m2 += dxhat[j] * xhat(r, j);
            }
            m1 /= n as f32;
            m2 /= n as f32;
            for j in 0..n {
                gx[r * n + j] += rstd * (dxhat[j] - m1 - xhat(r, j) * m2);
            }
        }
    }
}

pub(super) fn normalize_rows_backward(
    g: &Graph,
    x: Var,
    inv_norms: &[f32],
    out: &Tensor,
    gout: &[f32],
    grads: &mut [Option<Vec<f32>>],
) {
    let n = out.cols();
    if let Some(gx) = g.acc(grads, x) {
        for (r, &inv) in inv_norms.iter().enumerate() {
            let y = &out.data()[r * n..(r + 1) * n];
            let go = &gout[r * n..(r + 1) * n];
            let dot: f32 = y.iter().zip(go).map(|(a, b)| a * b).sum();
            for j in 0..n {
                gx[r * n + j] += inv * (go[j] - dot * y[j]);
            }
        }
    }
}
