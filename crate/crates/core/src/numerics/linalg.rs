use super::graph::{add_into, Graph, Op, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Strided view of a matrix inside a flat slice.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn rows(data: &'a [f32], cols: usize) -> Self {
        Mat { data, rs: cols, cs: 1 }
    }
    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn t(data: &'a [f32], cols: usize) -> Self {
        Mat { data, rs: 1, cs: cols }
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, with `c` row-stride `rsc`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, c: &mut [f32], rsc: usize, accumulate: bool) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                c[i * rsc..i * rsc + n].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        return;
    }
    assert!((m - 1) * a.rs + (k - 1) * a.cs < a.data.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * b.rs + (n - 1) * b.cs < b.data.len(), "gemm: rhs out of bounds");
    assert!((m - 1) * rsc + n - 1 < c.len(), "gemm: output out of bounds");
    if m * n * k < 2048 {
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += a.data[i * a.rs + p * a.cs] * b.data[p * b.rs + j * b.cs];
                }
                let dst = &mut c[i * rsc + j];
                if accumulate {
                    *dst += s;
                } else {
                    *dst = s;
                }
            }
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds of all three operands were asserted above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn leading(shape: &[usize]) -> Vec<usize> {
    shape[..shape.len().saturating_sub(1)].to_vec()
}

impl Graph {
    /// `x[.., in] · w[in, out] + b[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        if ws.shape().len() != 2 || xs.cols() != ws.shape()[0] {
            return Err(shape_err!("affine: x {:?} vs w {:?}", xs.shape(), ws.shape()));
        }
        let (m, k, n) = (xs.rows(), ws.shape()[0], ws.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, Mat::rows(xs.data(), k), Mat::rows(ws.data(), n), &mut out, n, false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(shape_err!("affine: bias {:?} for {} outputs", bv.shape(), n));
            }
            for row in out.chunks_mut(n) {
                add_into(row, bv.data());
            }
        }
        let mut shape = leading(xs.shape());
        shape.push(n);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new(shape, out)?, Op::Affine { x, w, b }, &inputs)
    }

    /// `a[.., k] · b[k, n]`, or `a · bᵀ` for `b[n, k]` when `trans_b`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 {
            return Err(shape_err!("matmul: rhs must be 2-D, got {:?}", bv.shape()));
        }
        let (k, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if av.cols() != k {
            return Err(shape_err!(
                "matmul: inner extents differ, {:?} x {:?}{}",
                av.shape(),
                bv.shape(),
                if trans_b { "ᵀ" } else { "" }
            ));
        }
        let m = av.rows();
        let bm = if trans_b { Mat::t(bv.data(), k) } else { Mat::rows(bv.data(), n) };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, Mat::rows(av.data(), k), bm, &mut out, n, false);
        let mut shape = leading(av.shape());
        shape.push(n);
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(shape_err!("transpose needs 2-D, got {:?}", v.shape()));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let d = v.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(Tensor::new([c, r], out)?, Op::Transpose(x), &[x])
    }

    /// Concatenate along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?);
        let lead = leading(first.shape());
        let rows = first.rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if leading(v.shape()) != lead {
                return Err(shape_err!("concat_last: {:?} vs {:?}", v.shape(), first.shape()));
            }
            total += v.cols();
        }
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            let c = v.cols();
            for r in 0..rows {
                out[r * total + off..r * total + off + c].copy_from_slice(v.row(r));
            }
            off += c;
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::new(shape, out)?, Op::ConcatLast(parts.to_vec()), parts)
    }

    /// Concatenate along the first axis; trailing shapes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?);
        let tail = first.shape()[1..].to_vec();
        let mut n0 = 0;
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(shape_err!("concat_rows: {:?} vs {:?}", v.shape(), first.shape()));
            }
            n0 += v.shape()[0];
            out.extend_from_slice(v.data());
        }
        let mut shape = vec![n0];
        shape.extend(tail);
        self.push(Tensor::new(shape, out)?, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        if start + len > c {
            return Err(shape_err!("slice_last {}..{} of {:?}", start, start + len, v.shape()));
        }
        let mut out = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            out.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let mut shape = leading(v.shape());
        shape.push(len);
        self.push(Tensor::new(shape, out)?, Op::SliceLast { x, start }, &[x])
    }

    /// Entries `start..start+len` of the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let n0 = v.shape().first().copied().unwrap_or(0);
        if start + len > n0 {
            return Err(shape_err!("slice_rows {}..{} of {:?}", start, start + len, v.shape()));
        }
        let inner: usize = v.shape()[1..].iter().product();
        let out = v.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        self.push(Tensor::new(shape, out)?, Op::SliceRows { x, start }, &[x])
    }

    /// `y[m, :] = Σ_k w[m, k] · x[m, k, :]`.
    pub fn weighted_sum(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wv, xv) = (self.value(w), self.value(x));
        let xs = xv.shape();
        if xs.len() != 3 || wv.shape() != &xs[..2] {
            return Err(shape_err!("weighted_sum: w {:?} vs x {:?}", wv.shape(), xs));
        }
        let (m, k, d) = (xs[0], xs[1], xs[2]);
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let o = &mut out[i * d..(i + 1) * d];
            for j in 0..k {
                let wij = wv.data()[i * k + j];
                let row = &xv.data()[(i * k + j) * d..(i * k + j + 1) * d];
                o.iter_mut().zip(row).for_each(|(o, r)| *o += wij * r);
            }
        }
        self.push(Tensor::new([m, d], out)?, Op::WeightedSum { w, x }, &[w, x])
    }
}

pub(super) fn affine_backward(g: &Graph, x: Var, w: Var, b: Option<Var>, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let (xv, wv) = (g.value(x), g.value(w));
    let (m, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
    if let Some(gx) = g.acc(grads, x) {
        gemm(m, n, k, Mat::rows(gout, n), Mat::t(wv.data(), n), gx, k, true);
    }
    if let Some(gw) = g.acc(grads, w) {
        gemm(k, m, n, Mat::t(xv.data(), k), Mat::rows(gout, n), gw, n, true);
    }
    if let Some(b) = b {
        if let Some(gb) = g.acc(grads, b) {
            for row in gout.chunks(n) {
                add_into(gb, row);
            }
        }
    }
}

pub(super) fn matmul_backward(g: &Graph, a: Var, b: Var, trans_b: bool, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let (av, bv) = (g.value(a), g.value(b));
    let k = av.cols();
    let m = av.rows();
    let n = if trans_b { bv.shape()[0] } else { bv.shape()[1] };
    if let Some(ga) = g.acc(grads, a) {
        // dA = dY · op(B)ᵀ
        let bt = if trans_b { Mat::rows(bv.data(), k) } else { Mat::t(bv.data(), n) };
        gemm(m, n, k, Mat::rows(gout, n), bt, ga, k, true);
    }
    if let Some(gb) = g.acc(grads, b) {
        if trans_b {
            // B[n,k]: dB = dYᵀ · A
            gemm(n, m, k, Mat::t(gout, n), Mat::rows(av.data(), k), gb, k, true);
        } else {
            gemm(k, m, n, Mat::t(av.data(), k), Mat::rows(gout, n), gb, n, true);
        }
    }
}

pub(super) fn concat_last_backward(g: &Graph, parts: &[Var], gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let total: usize = parts.iter().map(|&p| g.value(p).cols()).sum();
    let mut off = 0;
    for &p in parts {
        let v = g.value(p);
        let (rows, c) = (v.rows(), v.cols());
        if let Some(gp) = g.acc(grads, p) {
            for r in 0..rows {
                add_into(&mut gp[r * c..(r + 1) * c], &gout[r * total + off..r * total + off + c]);
            }
        }
        off += c;
    }
}

pub(super) fn concat_rows_backward(g: &Graph, parts: &[Var], gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let mut off = 0;
    for &p in parts {
        let n = g.value(p).len();
        if let Some(gp) = g.acc(grads, p) {
            add_into(gp, &gout[off..off + n]);
        }
        off += n;
    }
}

pub(super) fn slice_last_backward(
    g: &Graph,
    x: Var,
    start: usize,
    out: &Tensor,
    gout: &[f32],
    grads: &mut [Option<Vec<f32>>],
) {
    let c = g.value(x).cols();
    let len = out.cols();
    if let Some(gx) = g.acc(grads, x) {
        for (r, go) in gout.chunks(len).enumerate() {
            add_into(&mut gx[r * c + start..r * c + start + len], go);
        }
    }
}

pub(super) fn slice_rows_backward(g: &Graph, x: Var, start: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let inner: usize = g.value(x).shape()[1..].iter().product();
    if let Some(gx) = g.acc(grads, x) {
        add_into(&mut gx[start * inner..start * inner + gout.len()], gout);
    }
}

pub(super) fn transpose_backward(g: &Graph, x: Var, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let s = g.value(x).shape();
    let (r, c) = (s[0], s[1]);
    if let Some(gx) = g.acc(grads, x) {
        for i in 0..r {
            for j in 0..c {
                gx[i * c + j] += gout[j * r + i];
            }
        }
    }
}

pub(super) fn weighted_sum_backward(g: &Graph, w: Var, x: Var, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let (wv, xv) = (g.value(w), g.value(x));
    let s = xv.shape();
    let (m, k, d) = (s[0], s[1], s[2]);
    if let Some(gw) = g.acc(grads, w) {
        for i in 0..m {
            let go = &gout[i * d..(i + 1) * d];
            for j in 0..k {
                let row = &xv.data()[(i * k + j) * d..(i * k + j + 1) * d];
                gw[i * k + j] += row.iter().zip(go).map(|(a, b)| a * b).sum::<f32>();
            }
        }
    }
    if let Some(gx) = g.acc(grads, x) {
        for i in 0..m {
            let go = &gout[i * d..(i + 1) * d];
            for j in 0..k {
                let wij = wv.data()[i * k + j];
                gx[(i * k + j) * d..(i * k + j + 1) * d]
                    .iter_mut()
                    .zip(go)
                    .for_each(|(gx, go)| *gx += wij * go);
            }
        }
    }
}
