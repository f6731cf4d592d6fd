use super::graph::{add_into, Graph, Op, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Bilinear corner indices and weights for one clamped coordinate.
#[derive(Clone, Copy, Debug)]
struct Axis {
    i0: usize,
    i1: usize,
    w: f32,
    clamped: bool,
}

fn axis(c: f32, extent: usize) -> Axis {
    let hi = (extent - 1) as f32;
    let clamped = !(0.0..=hi).contains(&c);
    let cc = c.clamp(0.0, hi);
    let i0 = (cc.floor() as usize).min(extent - 1);
    let i1 = (i0 + 1).min(extent - 1);
    Axis { i0, i1, w: cc - i0 as f32, clamped }
}

fn map_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, d] if h > 0 && w > 0 => Ok((h, w, d)),
        _ => Err(shape_err!("expected a non-empty [H, W, D] map, got {:?}", shape)),
    }
}

impl Graph {
    /// Samples `map[H, W, D]` at `points[n, 2]` given as `(x, y)` map
    /// coordinates. Coordinates are clamped to `[0, extent − 1]`.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var> {
        let (h, w, d) = map_dims(self.shape(map))?;
        let pv = self.value(points);
        if pv.cols() != 2 {
            return Err(shape_err!("bilinear_sample: points must be [n, 2], got {:?}", pv.shape()));
        }
        let n = pv.rows();
        let md = self.data(map);
        let mut out = vec![0.0; n * d];
        for (i, p) in pv.data().chunks(2).enumerate() {
            let (ax, ay) = (axis(p[0], w), axis(p[1], h));
            let o = &mut out[i * d..(i + 1) * d];
            for (yy, wy) in [(ay.i0, 1.0 - ay.w), (ay.i1, ay.w)] {
                for (xx, wx) in [(ax.i0, 1.0 - ax.w), (ax.i1, ax.w)] {
                    let wt = wy * wx;
                    if wt == 0.0 {
                        continue;
                    }
                    let src = &md[(yy * w + xx) * d..(yy * w + xx + 1) * d];
                    o.iter_mut().zip(src).for_each(|(o, s)| *o += wt * s);
                }
            }
        }
        self.push(Tensor::new([n, d], out)?, Op::Bilinear { map, points }, &[map, points])
    }

    /// Nearest-neighbour upsampling of `x[H, W, C]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, c) = map_dims(self.shape(x))?;
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.data(x);
        let mut out = vec![0.0; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((oy / factor) * w + ox / factor) * c;
                out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c].copy_from_slice(&xd[src..src + c]);
            }
        }
        self.push(Tensor::new([oh, ow, c], out)?, Op::UpsampleNearest { x, factor }, &[x])
    }

    /// Bilinear upsampling of `x[H, W, C]` with half-pixel centers.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, c) = map_dims(self.shape(x))?;
        let (oh, ow) = (h * factor, w * factor);
        let (ys, xs) = (up_axes(h, factor), up_axes(w, factor));
        let xd = self.data(x);
        let mut out = vec![0.0; oh * ow * c];
        for (oy, ay) in ys.iter().enumerate() {
            for (ox, ax) in xs.iter().enumerate() {
                let o = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for (yy, wy) in [(ay.i0, 1.0 - ay.w), (ay.i1, ay.w)] {
                    for (xx, wx) in [(ax.i0, 1.0 - ax.w), (ax.i1, ax.w)] {
                        let wt = wy * wx;
                        let src = &xd[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                        o.iter_mut().zip(src).for_each(|(o, s)| *o += wt * s);
                    }
                }
            }
        }
        self.push(Tensor::new([oh, ow, c], out)?, Op::UpsampleBilinear { x, factor }, &[x])
    }

    /// Rows of `x` (first axis) selected by `index`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let r = xv.shape().first().copied().unwrap_or(0);
        let inner: usize = xv.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(index.len() * inner);
        for &i in &index {
            if i >= r {
                return Err(shape_err!("gather_rows: index {} out of {} rows", i, r));
            }
            out.extend_from_slice(&xv.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = index.len();
        self.push(Tensor::new(shape, out)?, Op::Gather { x, index }, &[x])
    }

    /// Builds `[n, D]` from rows of several `[R_s, D]` sources; `None` yields a zero row.
    pub fn gather_rows_multi(&mut self, sources: &[Var], index: Vec<Option<(usize, usize)>>, dim: usize) -> Result<Var> {
        for &s in sources {
            if self.value(s).cols() != dim {
                return Err(shape_err!("gather_rows_multi: source {:?} vs dim {}", self.shape(s), dim));
            }
        }
        let mut out = vec![0.0; index.len() * dim];
        for (o, idx) in out.chunks_mut(dim).zip(&index) {
            if let Some((s, r)) = *idx {
                let src = self.value(*sources.get(s).ok_or_else(|| shape_err!("gather_rows_multi: no source {}", s))?);
                if r >= src.rows() {
                    return Err(shape_err!("gather_rows_multi: row {} of {:?}", r, src.shape()));
                }
                o.copy_from_slice(src.row(r));
            }
        }
        let n = index.len();
        self.push(
            Tensor::new([n, dim], out)?,
            Op::GatherMulti { sources: sources.to_vec(), index },
            sources,
        )
    }
}

fn up_axes(extent: usize, factor: usize) -> Vec<Axis> {
    (0..extent * factor)
        .map(|o| axis((o as f32 + 0.5) / factor as f32 - 0.5, extent))
        .collect()
}

pub(super) fn bilinear_backward(g: &Graph, map: Var, points: Var, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let s = g.shape(map);
    let (h, w, d) = (s[0], s[1], s[2]);
    let pd = g.data(points);
    let md = g.data(map);
    if let Some(gm) = g.acc(grads, map) {
        for (i, p) in pd.chunks(2).enumerate() {
            let (ax, ay) = (axis(p[0], w), axis(p[1], h));
            let go = &gout[i * d..(i + 1) * d];
            for (yy, wy) in [(ay.i0, 1.0 - ay.w), (ay.i1, ay.w)] {
                for (xx, wx) in [(ax.i0, 1.0 - ax.w), (ax.i1, ax.w)] {
                    let wt = wy * wx;
                    if wt == 0.0 {
                        continue;
                    }
                    gm[(yy * w + xx) * d..(yy * w + xx + 1) * d]
                        .iter_mut()
                        .zip(go)
                        .for_each(|(g, o)| *g += wt * o);
                }
            }
        }
    }
    if let Some(gp) = g.acc(grads, points) {
        let at = |y: usize, x: usize| &md[(y * w + x) * d..(y * w + x + 1) * d];
        for (i, p) in pd.chunks(2).enumerate() {
            let (ax, ay) = (axis(p[0], w), axis(p[1], h));
            let go = &gout[i * d..(i + 1) * d];
            let dot = |a: &[f32], b: &[f32]| -> f32 { a.iter().zip(b).zip(go).map(|((a, b), g)| (a - b) * g).sum() };
            if !ax.clamped && ax.i1 != ax.i0 {
                gp[2 * i] += (1.0 - ay.w) * dot(at(ay.i0, ax.i1), at(ay.i0, ax.i0))
                    + ay.w * dot(at(ay.i1, ax.i1), at(ay.i1, ax.i0));
            }
            if !ay.clamped && ay.i1 != ay.i0 {
                gp[2 * i + 1] += (1.0 - ax.w) * dot(at(ay.i1, ax.i0), at(ay.i0, ax.i0))
                    + ax.w * dot(at(ay.i1, ax.i1), at(ay.i0, ax.i1));
            }
        }
    }
}

pub(super) fn upsample_nearest_backward(g: &Graph, x: Var, factor: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let s = g.shape(x);
    let (w, c) = (s[1], s[2]);
    let (oh, ow) = (s[0] * factor, w * factor);
    if let Some(gx) = g.acc(grads, x) {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((oy / factor) * w + ox / factor) * c;
                add_into(&mut gx[dst..dst + c], &gout[(oy * ow + ox) * c..(oy * ow + ox + 1) * c]);
            }
        }
    }
}

pub(super) fn upsample_bilinear_backward(g: &Graph, x: Var, factor: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let s = g.shape(x);
    let (h, w, c) = (s[0], s[1], s[2]);
    let ow = w * factor;
    let (ys, xs) = (up_axes(h, factor), up_axes(w, factor));
    if let Some(gx) = g.acc(grads, x) {
        for (oy, ay) in ys.iter().enumerate() {
            for (ox, ax) in xs.iter().enumerate() {
                let go = &gout[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for (yy, wy) in [(ay.i0, 1.0 - ay.w), (ay.i1, ay.w)] {
                    for (xx, wx) in [(ax.i0, 1.0 - ax.w), (ax.i1, ax.w)] {
                        let wt = wy * wx;
                        gx[(yy * w + xx) * c..(yy * w + xx + 1) * c]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(g, o)| *g += wt * o);
                    }
                }
            }
        }
    }
}

pub(super) fn gather_backward(g: &Graph, x: Var, index: &[usize], gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let inner: usize = g.shape(x)[1..].iter().product();
    if let Some(gx) = g.acc(grads, x) {
        for (k, &i) in index.iter().enumerate() {
            add_into(&mut gx[i * inner..(i + 1) * inner], &gout[k * inner..(k + 1) * inner]);
        }
    }
}

pub(super) fn gather_multi_backward(
    g: &Graph,
    sources: &[Var],
    index: &[Option<(usize, usize)>],
    gout: &[f32],
    grads: &mut [Option<Vec<f32>>],
) {
    for (s, &src) in sources.iter().enumerate() {
        let dim = g.value(src).cols();
        if let Some(gs) = g.acc(grads, src) {
            for (k, idx) in index.iter().enumerate() {
                if let Some((si, r)) = *idx {
                    if si == s {
                        add_into(&mut gs[r * dim..(r + 1) * dim], &gout[k * dim..(k + 1) * dim]);
                    }
                }
            }
        }
    }
}
