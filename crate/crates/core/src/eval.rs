//! Metrics over complete prediction arrays, the prediction stream format
//! and the two reference baselines.

mod baselines;
mod metrics;
mod stream;

pub use baselines::{feature_match_baseline, static_baseline};
pub use metrics::{average_jaccard, delta_avg, evaluate, mte, occlusion_accuracy, survival, DeltaAvg, MetricReport, THRESHOLDS, SURVIVAL_PX};
pub use stream::{read_stream, run_tracker, write_record, PointRecord, FrameRecord};

use crate::error::{Error, Result};
use crate::loss::GroundTruthTrack;

/// Predicted positions and visibility, row-major `[queries, frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub queries: usize,
    pub frames: usize,
    pub positions: Vec<[f32; 2]>,
    pub visible: Vec<bool>,
}

impl Predictions {
    pub fn new(queries: usize, frames: usize) -> Self {
        Predictions { queries, frames, positions: vec![[0.0; 2]; queries * frames], visible: vec![false; queries * frames] }
    }

    pub fn set(&mut self, query: usize, t: usize, position: [f32; 2], visible: bool) {
        self.positions[query * self.frames + t] = position;
        self.visible[query * self.frames + t] = visible;
    }

    pub fn position(&self, query: usize, t: usize) -> [f32; 2] {
        self.positions[query * self.frames + t]
    }

    pub fn is_visible(&self, query: usize, t: usize) -> bool {
        self.visible[query * self.frames + t]
    }
}

/// Ground truth paired with predictions; scored frames are those strictly
/// after each query's start.
#[derive(Clone, Copy, Debug)]
pub struct EvalInput<'a> {
    pub gt: &'a GroundTruthTrack,
    pub pred: &'a Predictions,
}

impl<'a> EvalInput<'a> {
    pub fn new(gt: &'a GroundTruthTrack, pred: &'a Predictions) -> Result<Self> {
        if gt.queries != pred.queries || gt.frames != pred.frames {
            return Err(Error::Shape(format!(
                "predictions cover {}x{}, ground truth {}x{}",
                pred.queries, pred.frames, gt.queries, gt.frames
            )));
        }
        Ok(EvalInput { gt, pred })
    }

    /// `(query, frame)` pairs that count.
    pub fn scored(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.gt.queries).flat_map(move |i| (self.gt.starts[i] + 1..self.gt.frames).map(move |t| (i, t)))
    }

    pub fn error(&self, i: usize, t: usize) -> f64 {
        let [px, py] = self.pred.position(i, t);
        let [gx, gy] = self.gt.position(i, t);
        ((px as f64 - gx as f64).powi(2) + (py as f64 - gy as f64).powi(2)).sqrt()
    }
}

/// A generated evaluation clip with one query per track at its first
/// visible frame.
pub struct EvalClip {
    pub seed: u64,
    pub frames: Vec<crate::encoder::Frame>,
    pub track: GroundTruthTrack,
    pub queries: Vec<crate::data::QueryRecord>,
}

impl EvalClip {
    pub fn generate(seed: u64, scene: &crate::data::SceneConfig, frames: usize) -> Result<Self> {
        let mut cfg = scene.clone();
        cfg.frames = frames;
        let s = crate::data::SpriteScene::generate(seed, &cfg)?;
        let (frames, track) = crate::data::render_scene(&s)?;
        let queries = crate::data::queried_first(&track);
        Ok(EvalClip { seed, frames, track, queries })
    }

    /// Whether some queried point is hidden after its start.
    pub fn has_occlusion(&self) -> bool {
        let t = &self.track;
        (0..t.queries).any(|i| (t.starts[i] + 1..t.frames).any(|f| !t.is_visible(i, f)))
    }

    pub fn score(&self, pred: &Predictions) -> Result<MetricReport> {
        Ok(evaluate(&EvalInput::new(&self.track, pred)?))
    }

    /// Runs the tracker causally over the clip.
    pub fn track_with(&self, model: &crate::engine::TrackerModel, opts: crate::engine::SessionOptions) -> Result<Predictions> {
        run_tracker(model, self.frames.iter().cloned().map(Ok), &self.queries, self.track.queries, opts, |_| Ok(()))
    }
}

/// Per-clip metrics averaged over clips; clips where a metric is absent are
/// left out of that metric's mean.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct MeanReport {
    pub clips: usize,
    pub aj: Option<f64>,
    pub delta_avg: Option<f64>,
    pub oa: Option<f64>,
    pub mte: Option<f64>,
    pub survival: Option<f64>,
}

pub fn mean_report(reports: &[MetricReport]) -> MeanReport {
    let mean = |f: fn(&MetricReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    MeanReport {
        clips: reports.len(),
        aj: mean(|r| r.aj),
        delta_avg: mean(|r| r.delta_avg),
        oa: mean(|r| r.oa),
        mte: mean(|r| r.mte),
        survival: mean(|r| r.survival),
    }
}
