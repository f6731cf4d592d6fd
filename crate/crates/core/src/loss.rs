//! Training targets and the weighted multi-term objective.

use crate::encoder::STRIDE;
use crate::error::{shape_err, Error, Result};
use crate::heads::patch_center;
use crate::numerics::{Graph, Var};

/// Patch-classification weight.
pub const LAMBDA: f32 = 3.0;

/// Ground truth for `N` queries over `T` frames, query-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTrack {
    pub queries: usize,
    pub frames: usize,
    pub positions: Vec<[f32; 2]>,
    pub visible: Vec<bool>,
    pub starts: Vec<usize>,
}

impl GroundTruthTrack {
    /// Visibility before each query's start frame is cleared.
    pub fn new(frames: usize, positions: Vec<[f32; 2]>, mut visible: Vec<bool>, starts: Vec<usize>) -> Result<Self> {
        let queries = starts.len();
        if positions.len() != queries * frames || visible.len() != queries * frames {
            return Err(shape_err!(
                "track with {} queries × {} frames got {} positions, {} visibility flags",
                queries,
                frames,
                positions.len(),
                visible.len()
            ));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("track positions must be finite".into()));
        }
        for (i, &s) in starts.iter().enumerate() {
            visible[i * frames..i * frames + s.min(frames)].iter_mut().for_each(|v| *v = false);
        }
        Ok(GroundTruthTrack { queries, frames, positions, visible, starts })
    }

    pub fn position(&self, query: usize, t: usize) -> [f32; 2] {
        self.positions[query * self.frames + t]
    }

    pub fn is_visible(&self, query: usize, t: usize) -> bool {
        self.visible[query * self.frames + t]
    }

    /// Reorders queries.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let f = self.frames;
        GroundTruthTrack {
            queries: order.len(),
            frames: f,
            positions: order.iter().flat_map(|&i| self.positions[i * f..(i + 1) * f].iter().copied()).collect(),
            visible: order.iter().flat_map(|&i| self.visible[i * f..(i + 1) * f].iter().copied()).collect(),
            starts: order.iter().map(|&i| self.starts[i]).collect(),
        }
    }
}

/// Frame geometry for target construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    /// Uncertainty threshold in frame pixels.
    pub delta_u: f32,
}

impl Geometry {
    pub fn grid_w(&self) -> usize {
        self.width / STRIDE
    }

    pub fn contains(&self, p: [f32; 2]) -> bool {
        p[0] >= 0.0 && p[0] < self.width as f32 && p[1] >= 0.0 && p[1] < self.height as f32
    }

    /// Level-0 patch holding pixel position `p`.
    pub fn patch_of(&self, p: [f32; 2]) -> usize {
        let c = (p[0] / STRIDE as f32).floor() as usize;
        let r = (p[1] / STRIDE as f32).floor() as usize;
        r * self.grid_w() + c
    }
}

/// Values read back from one frame's forward pass that targets depend on.
#[derive(Clone, Debug)]
pub struct PredictionSnapshot<'a> {
    /// Center of the selected patch per query.
    pub patch_centers: &'a [(f32, f32)],
    /// Final position per query.
    pub positions: &'a [(f32, f32)],
    /// `N·k` candidate patch indices.
    pub topk: &'a [usize],
    pub k: usize,
}

/// Targets for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTargets {
    /// Queries that contribute on this frame.
    pub valid: Vec<usize>,
    pub visible: Vec<bool>,
    pub patch: Vec<usize>,
    /// Ground truth minus the selected patch center.
    pub offset: Vec<[f32; 2]>,
    pub uncertain: Vec<bool>,
    /// `N·k` candidate match flags.
    pub topk_match: Vec<bool>,
    /// Candidate nearest the ground truth.
    pub topk_best: Vec<usize>,
}

pub fn make_targets(gt: &GroundTruthTrack, t: usize, pred: &PredictionSnapshot<'_>, geom: &Geometry) -> Result<FrameTargets> {
    let n = gt.queries;
    if pred.patch_centers.len() != n || pred.positions.len() != n || pred.topk.len() != n * pred.k {
        return Err(shape_err!("prediction snapshot does not cover {} queries", n));
    }
    if t >= gt.frames {
        return Err(shape_err!("frame {} of a {}-frame track", t, gt.frames));
    }
    let gw = geom.grid_w();
    let mut out = FrameTargets {
        valid: Vec::new(),
        visible: Vec::with_capacity(n),
        patch: Vec::with_capacity(n),
        offset: Vec::with_capacity(n),
        uncertain: Vec::with_capacity(n),
        topk_match: Vec::with_capacity(n * pred.k),
        topk_best: Vec::with_capacity(n),
    };
    for i in 0..n {
        let p = gt.position(i, t);
        let vis = gt.is_visible(i, t);
        let inside = geom.contains(p);
        if t >= gt.starts[i] && inside {
            out.valid.push(i);
        }
        out.visible.push(vis);
        out.patch.push(if inside { geom.patch_of(p) } else { 0 });
        let c = pred.patch_centers[i];
        out.offset.push([p[0] - c.0, p[1] - c.1]);
        let e = pred.positions[i];
        let err = ((e.0 - p[0]).powi(2) + (e.1 - p[1]).powi(2)).sqrt();
        out.uncertain.push(!vis || err > geom.delta_u);
        let mut best = (0, f32::INFINITY);
        for (j, &idx) in pred.topk[i * pred.k..(i + 1) * pred.k].iter().enumerate() {
            let cc = patch_center(idx, gw);
            let d = ((cc.0 - p[0]).powi(2) + (cc.1 - p[1]).powi(2)).sqrt();
            out.topk_match.push(vis && d <= geom.delta_u);
            if d < best.1 {
                best = (j, d);
            }
        }
        out.topk_best.push(best.0);
    }
    Ok(out)
}

/// Head outputs of one frame, all `[N, ·]`.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub refined_logits: Var,
    pub decoder_logits: Var,
    /// Offsets after every refinement layer.
    pub offsets: Vec<Var>,
    /// Visibility and uncertainty logits.
    pub status: Var,
    pub topk_uncertainty: Var,
    pub topk_score_logits: Var,
}

/// Per-term sums over valid pairs; `None` when a term has no contributor.
#[derive(Clone, Debug, Default)]
pub struct TermSums {
    pub patch_refined: Option<Var>,
    pub patch_decoder: Option<Var>,
    pub offset: Option<Var>,
    pub visibility: Option<Var>,
    pub uncertainty: Option<Var>,
    pub topk_uncertainty: Option<Var>,
    pub topk_score: Option<Var>,
    /// Valid (query, frame) pairs counted.
    pub pairs: usize,
}

/// Scalar values of each term after reduction, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub total: f32,
    pub patch_refined: f32,
    pub patch_decoder: f32,
    pub offset: f32,
    pub visibility: f32,
    pub uncertainty: f32,
    pub topk_uncertainty: f32,
    pub topk_score: f32,
}

fn accumulate(g: &mut Graph, slot: &mut Option<Var>, v: Var) -> Result<()> {
    *slot = Some(match *slot {
        Some(s) => g.add(s, v)?,
        None => v,
    });
    Ok(())
}

impl TermSums {
    /// Adds one frame's contributions.
    pub fn add_frame(&mut self, g: &mut Graph, out: &HeadOutputs, tg: &FrameTargets) -> Result<()> {
        let k = g.shape(out.topk_uncertainty)[1];
        let valid = &tg.valid;
        self.pairs += valid.len();
        if valid.is_empty() {
            return Ok(());
        }
        let seen: Vec<usize> = valid.iter().copied().filter(|&i| tg.visible[i]).collect();
        if !seen.is_empty() {
            let targets: Vec<usize> = seen.iter().map(|&i| tg.patch[i]).collect();
            for (logits, slot) in [(out.refined_logits, &mut self.patch_refined), (out.decoder_logits, &mut self.patch_decoder)] {
                let rows = g.gather_rows(logits, seen.clone())?;
                let ce = g.cross_entropy(rows, targets.clone())?;
                let s = g.sum_all(ce)?;
                accumulate(g, slot, s)?;
            }
            let target: Vec<f32> = seen.iter().flat_map(|&i| tg.offset[i]).collect();
            let layers = out.offsets.len() as f32;
            for &o in &out.offsets {
                let rows = g.gather_rows(o, seen.clone())?;
                let l1 = g.l1_clipped(rows, target.clone(), STRIDE as f32)?;
                let s = g.sum_all(l1)?;
                let s = g.scale(s, 1.0 / layers)?;
                accumulate(g, &mut self.offset, s)?;
            }
            let rows = g.gather_rows(out.topk_score_logits, seen.clone())?;
            let ce = g.cross_entropy(rows, seen.iter().map(|&i| tg.topk_best[i]).collect())?;
            let s = g.sum_all(ce)?;
            accumulate(g, &mut self.topk_score, s)?;
        }
        let status = g.gather_rows(out.status, valid.clone())?;
        let vis_logit = g.slice_last(status, 0, 1)?;
        let bce = g.bce_with_logits(vis_logit, valid.iter().map(|&i| f32::from(u8::from(tg.visible[i]))).collect())?;
        let s = g.sum_all(bce)?;
        accumulate(g, &mut self.visibility, s)?;
        let unc_logit = g.slice_last(status, 1, 1)?;
        let bce = g.bce_with_logits(unc_logit, valid.iter().map(|&i| f32::from(u8::from(tg.uncertain[i]))).collect())?;
        let s = g.sum_all(bce)?;
        accumulate(g, &mut self.uncertainty, s)?;
        let rows = g.gather_rows(out.topk_uncertainty, valid.clone())?;
        let targets = valid
            .iter()
            .flat_map(|&i| tg.topk_match[i * k..(i + 1) * k].iter().map(|&m| f32::from(u8::from(m))))
            .collect();
        let bce = g.bce_with_logits(rows, targets)?;
        let s = g.sum_all(bce)?;
        let s = g.scale(s, 1.0 / k as f32)?;
        accumulate(g, &mut self.topk_uncertainty, s)?;
        Ok(())
    }

    /// Weighted total divided by the pair count. `None` when no pair is valid.
    pub fn assemble(&self, g: &mut Graph, lambda: f32) -> Result<Option<(Var, LossBreakdown)>> {
        if self.pairs == 0 {
            log::warn!("loss has no valid query-frame pairs");
            return Ok(None);
        }
        let inv = 1.0 / self.pairs as f32;
        let mut total = None;
        let mut bd = LossBreakdown::default();
        let terms = [
            (self.patch_refined, lambda, &mut bd.patch_refined),
            (self.patch_decoder, lambda, &mut bd.patch_decoder),
            (self.offset, 1.0, &mut bd.offset),
            (self.visibility, 1.0, &mut bd.visibility),
            (self.uncertainty, 1.0, &mut bd.uncertainty),
            (self.topk_uncertainty, 1.0, &mut bd.topk_uncertainty),
            (self.topk_score, 1.0, &mut bd.topk_score),
        ];
        for (term, w, out) in terms {
            if let Some(v) = term {
                *out = g.data(v)[0] * inv;
                let s = g.scale(v, w * inv)?;
                accumulate(g, &mut total, s)?;
            }
        }
        let total = total.expect("visibility term exists when pairs > 0");
        bd.total = g.data(total)[0];
        Ok(Some((total, bd)))
    }
}
