//! Float accounting for streaming inference and a windowed comparator.

use std::collections::VecDeque;

use serde::Serialize;

use super::model::TrackerModel;
use super::session::{SessionOptions, TrackerSession};
use crate::data::{SceneConfig, SpriteScene};
use crate::encoder::{Frame, QuerySpec};
use crate::error::Result;
use crate::numerics::Graph;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileReport {
    pub frames: usize,
    pub tracks: usize,
    pub memory_size: usize,
    pub dim: usize,
    /// Largest per-step transient count over the run.
    pub peak_transient_floats: usize,
    /// Session state after the last frame.
    pub persistent_floats: usize,
    pub params: usize,
    pub memory_floats: usize,
}

/// `n` queries on a regular grid, all starting at frame 0.
pub fn grid_queries(n: usize, height: usize, width: usize) -> Vec<QuerySpec> {
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols.max(1));
    (0..n)
        .map(|i| QuerySpec {
            start: 0,
            x: ((i % cols) as f32 + 0.5) * width as f32 / cols as f32,
            y: ((i / cols) as f32 + 0.5) * height as f32 / rows as f32,
        })
        .collect()
}

/// Synthetic input video; frames past the scene's length keep following
/// the same trajectories.
pub struct FrameSource {
    scene: SpriteScene,
}

impl FrameSource {
    pub fn new(seed: u64, height: usize, width: usize) -> Result<Self> {
        Ok(FrameSource { scene: SpriteScene::generate(seed, &SceneConfig::desk().with_size(height, width))? })
    }

    pub fn frame(&self, t: usize) -> Result<Frame> {
        self.scene.render_frame(t)
    }
}

/// Streams `frames` frames with `tracks` queries and records float counts.
pub fn profile(model: &TrackerModel, frames: usize, tracks: usize, memory_size: usize) -> Result<ProfileReport> {
    let cfg = &model.config;
    let src = FrameSource::new(cfg.seed, cfg.frame_h, cfg.frame_w)?;
    let queries = grid_queries(tracks, cfg.frame_h, cfg.frame_w);
    let opts = SessionOptions { memory_size: Some(memory_size), support_grid: false };
    let mut session = TrackerSession::new(model, &queries, opts)?;
    let mut peak = 0;
    for t in 0..frames {
        session.step(&src.frame(t)?)?;
        peak = peak.max(session.last_stats().transient_floats);
    }
    Ok(ProfileReport {
        frames,
        tracks,
        memory_size,
        dim: cfg.dim,
        peak_transient_floats: peak,
        persistent_floats: session.persistent_floats(),
        params: model.num_params(),
        memory_floats: session.memory().num_floats(),
    })
}

/// Holds the encoded features of the last `window` frames, as a tracker
/// that attends over a sliding window would.
pub struct WindowBuffer {
    window: usize,
    held: VecDeque<Vec<f32>>,
}

impl WindowBuffer {
    pub fn new(window: usize) -> Self {
        WindowBuffer { window, held: VecDeque::with_capacity(window) }
    }

    pub fn push(&mut self, features: Vec<f32>) {
        if self.held.len() == self.window {
            self.held.pop_front();
        }
        if self.window > 0 {
            self.held.push_back(features);
        }
    }

    pub fn floats(&self) -> usize {
        self.held.iter().map(Vec::len).sum()
    }
}

/// Peak floats of the window comparator over `frames` frames: buffered
/// pyramids plus the transient cost of encoding the newest frame.
pub fn window_peak(model: &TrackerModel, frames: usize, window: usize) -> Result<usize> {
    let cfg = &model.config;
    let src = FrameSource::new(cfg.seed, cfg.frame_h, cfg.frame_w)?;
    let mut buf = WindowBuffer::new(window);
    let mut peak = 0;
    for t in 0..frames {
        let mut g = Graph::new();
        let pyr = model.encoder.encode(&mut g, &model.params, &src.frame(t)?)?;
        let mut feats = g.data(pyr.fused).to_vec();
        for l in &pyr.levels[1..] {
            feats.extend_from_slice(g.data(*l));
        }
        buf.push(feats);
        peak = peak.max(buf.floats() + g.transient_floats());
    }
    Ok(peak)
}
