//! Fixtures shared by the benchmarks.

use streamtrack::encoder::{Frame, QuerySpec};
use streamtrack::engine::profile::{grid_queries, FrameSource};
use streamtrack::engine::{Config, TrackerModel};

pub fn model(cfg: &Config) -> TrackerModel {
    TrackerModel::new(cfg).expect("preset config is valid")
}

pub fn frames(cfg: &Config, n: usize) -> Vec<Frame> {
    let src = FrameSource::new(7, cfg.frame_h, cfg.frame_w).expect("scene");
    (0..n).map(|t| src.frame(t).expect("frame")).collect()
}

pub fn queries(cfg: &Config, n: usize) -> Vec<QuerySpec> {
    grid_queries(n, cfg.frame_h, cfg.frame_w)
}
