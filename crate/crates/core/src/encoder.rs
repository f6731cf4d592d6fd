//! Convolutional feature pyramid with FPN fusion, and query initialization
//! by bilinear sampling of the fused map.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::numerics::nn::{LayerNorm, Linear};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Patch stride of pyramid level 0, in pixels.
pub const STRIDE: usize = 4;
/// Number of pyramid levels.
pub const LEVELS: usize = 4;
/// Frames must be divisible by the coarsest level's stride.
pub const FRAME_MULTIPLE: usize = STRIDE << (LEVELS - 1);

const PATCH_KERNEL: usize = 8;
const PATCH_PAD: usize = 2;

/// One RGB video frame, `H × W × 3` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f32>,
}

impl Frame {
    pub fn new(index: usize, height: usize, width: usize, rgb: Vec<f32>) -> Result<Self> {
        check_frame_size(height, width)?;
        if rgb.len() != height * width * 3 {
            return Err(shape_err!("frame {}x{} needs {} values, got {}", height, width, height * width * 3, rgb.len()));
        }
        if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numeric("frame values must lie in [0, 1]".into()));
        }
        Ok(Frame { index, height, width, rgb })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.height, self.width, 3], self.rgb.clone()).expect("validated at construction")
    }
}

pub fn check_frame_size(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % FRAME_MULTIPLE != 0 || width % FRAME_MULTIPLE != 0 {
        return Err(shape_err!(
            "frame {}x{} must be a non-zero multiple of {} in both extents",
            height,
            width,
            FRAME_MULTIPLE
        ));
    }
    Ok(())
}

/// Extents `(h, w)` of pyramid level `level` for a frame.
pub fn level_extent(height: usize, width: usize, level: usize) -> (usize, usize) {
    let s = STRIDE << level;
    (height / s, width / s)
}

/// A query: start frame and pixel position `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuerySpec {
    pub start: usize,
    pub x: f32,
    pub y: f32,
}

impl QuerySpec {
    /// Rejects positions outside `[0, W) × [0, H)`.
    pub fn new(start: usize, x: f32, y: f32, height: usize, width: usize) -> Result<Self> {
        if !(x >= 0.0 && x < width as f32 && y >= 0.0 && y < height as f32) {
            return Err(Error::Param(format!("query ({x}, {y}) outside {width}x{height} frame")));
        }
        Ok(QuerySpec { start, x, y })
    }
}

/// Pyramid recorded on a graph: `levels[l]` is `[H/(S·2^l), W/(S·2^l), D]`,
/// `fused` is at level-0 resolution.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub levels: [Var; LEVELS],
    pub fused: Var,
}

/// Pyramid values detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub fused: Tensor,
}

impl Pyramid {
    pub fn to_tensors(&self, g: &Graph) -> FeaturePyramid {
        FeaturePyramid {
            levels: self.levels.iter().map(|&v| g.value(v).clone()).collect(),
            fused: g.value(self.fused).clone(),
        }
    }
}

impl FeaturePyramid {
    pub fn num_floats(&self) -> usize {
        self.levels.iter().map(Tensor::len).sum::<usize>() + self.fused.len()
    }
}

/// Stride-4 patch embedding, three stride-2 stages and a top-down FPN.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub dim: usize,
    patch: Linear,
    stages: Vec<Linear>,
    norms: Vec<LayerNorm>,
    pub lateral: Vec<Linear>,
    pub top_down: Vec<Linear>,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let patch_in = PATCH_KERNEL * PATCH_KERNEL * 3;
        let patch = Linear::new(ps, "encoder.patch", patch_in, dim, rng)?;
        let stages = (1..LEVELS)
            .map(|l| Linear::new(ps, &format!("encoder.stage{l}"), 9 * dim, dim, rng))
            .collect::<Result<_>>()?;
        let norms = (0..LEVELS)
            .map(|l| LayerNorm::new(ps, &format!("encoder.norm{l}"), dim))
            .collect::<Result<_>>()?;
        let lateral = (0..LEVELS)
            .map(|l| Linear::new(ps, &format!("fpn.lateral{l}"), dim, dim, rng))
            .collect::<Result<_>>()?;
        let top_down = (0..LEVELS - 1)
            .map(|l| Linear::new(ps, &format!("fpn.top_down{l}"), dim, dim, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder { dim, patch, stages, norms, lateral, top_down })
    }

    pub fn encode(&self, g: &mut Graph, ps: &ParamStore, frame: &Frame) -> Result<Pyramid> {
        check_frame_size(frame.height, frame.width)?;
        let mut centered = frame.to_tensor();
        centered.data_mut().iter_mut().for_each(|v| *v -= 0.5);
        let x = g.constant(centered)?;
        let mut levels = Vec::with_capacity(LEVELS);
        let w = g.param(ps, self.patch.weight);
        let b = self.patch.bias.map(|b| g.param(ps, b));
        let y = g.conv2d(x, w, b, PATCH_KERNEL, STRIDE, PATCH_PAD)?;
        levels.push(self.norms[0].forward(g, ps, y)?);
        for (l, stage) in self.stages.iter().enumerate() {
            let prev = g.gelu(levels[l])?;
            let w = g.param(ps, stage.weight);
            let b = stage.bias.map(|b| g.param(ps, b));
            let y = g.conv2d(prev, w, b, 3, 2, 1)?;
            levels.push(self.norms[l + 1].forward(g, ps, y)?);
        }
        let levels: [Var; LEVELS] = levels.try_into().expect("LEVELS entries");
        let fused = self.fuse(g, ps, &levels)?;
        Ok(Pyramid { levels, fused })
    }

    /// Lateral 1×1 encode per level, then coarse-to-fine 2× upsample and sum.
    fn fuse(&self, g: &mut Graph, ps: &ParamStore, levels: &[Var; LEVELS]) -> Result<Var> {
        let mut merged = self.lateral[LEVELS - 1].forward(g, ps, levels[LEVELS - 1])?;
        for l in (0..LEVELS - 1).rev() {
            let up = g.upsample_nearest(merged, 2)?;
            let td = self.top_down[l].forward(g, ps, up)?;
            let lat = self.lateral[l].forward(g, ps, levels[l])?;
            merged = g.add(lat, td)?;
        }
        Ok(merged)
    }
}

/// `q_init[i] = bilinear(fused, p_i / S)`; `fused` is `[H/S, W/S, D]`.
pub fn init_queries(g: &mut Graph, fused: Var, positions: &[(f32, f32)]) -> Result<Var> {
    let pts: Vec<f32> = positions
        .iter()
        .flat_map(|&(x, y)| [x / STRIDE as f32, y / STRIDE as f32])
        .collect();
    let p = g.constant(Tensor::new([positions.len(), 2], pts)?)?;
    g.bilinear_sample(fused, p)
}
