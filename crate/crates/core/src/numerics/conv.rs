use super::graph::{Graph, Op, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Geometry of a 2-D convolution over an `[H, W, C]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }
    /// Length of one unfolded patch, ordered `(ky, kx, c)`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c
    }

    /// Calls `f(col, src)` for every in-bounds tap of output position `(oy, ox)`.
    fn for_taps(&self, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
        for ky in 0..self.kernel {
            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            for kx in 0..self.kernel {
                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                if ix < 0 || ix >= self.w as isize {
                    continue;
                }
                f((ky * self.kernel + kx) * self.c, (iy as usize * self.w + ix as usize) * self.c);
            }
        }
    }
}

impl Graph {
    /// Unfolds `x[H, W, C]` into `[out_h * out_w, k * k * C]`, zero padded.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (h, w, c) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            ref s => return Err(shape_err!("im2col needs [H, W, C], got {:?}", s)),
        };
        if kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(shape_err!("im2col: kernel {} stride {} pad {} on {}x{}", kernel, stride, pad, h, w));
        }
        let geom = ConvGeom { h, w, c, kernel, stride, pad };
        let (oh, ow, pl) = (geom.out_h(), geom.out_w(), geom.patch_len());
        let xd = self.data(x);
        let mut out = vec![0.0; oh * ow * pl];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut out[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
                geom.for_taps(oy, ox, |col, src| row[col..col + c].copy_from_slice(&xd[src..src + c]));
            }
        }
        self.push(Tensor::new([oh * ow, pl], out)?, Op::Im2Col { x, geom }, &[x])
    }

    /// Strided 2-D convolution: `x[H, W, C]`, `weight[k*k*C, C_out]`, optional bias.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let cols = self.im2col(x, kernel, stride, pad)?;
        let y = self.affine(cols, weight, bias)?;
        let s = self.shape(x);
        let geom = ConvGeom { h: s[0], w: s[1], c: s[2], kernel, stride, pad };
        let cout = self.shape(y)[1];
        self.reshape(y, [geom.out_h(), geom.out_w(), cout])
    }
}

pub(super) fn im2col_backward(g: &Graph, x: Var, geom: &ConvGeom, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let (ow, pl, c) = (geom.out_w(), geom.patch_len(), geom.c);
    if let Some(gx) = g.acc(grads, x) {
        for oy in 0..geom.out_h() {
            for ox in 0..ow {
                let row = &gout[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
                geom.for_taps(oy, ox, |col, src| {
                    gx[src..src + c].iter_mut().zip(&row[col..col + c]).for_each(|(g, r)| *g += r);
                });
            }
        }
    }
}
