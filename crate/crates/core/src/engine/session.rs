//! Strictly causal frame-by-frame tracking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{FrameInput, TrackerModel};
use crate::encoder::{init_queries, Frame, QuerySpec};
use crate::error::{shape_err, Error, Result};
use crate::heads::TrackPrediction;
use crate::memory::{extend_ime, QueryMemory};
use crate::numerics::{Graph, Tensor};

/// Side length of the auxiliary support grid.
pub const SUPPORT_GRID: usize = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SessionOptions {
    /// Inference memory size; the training size when `None`.
    pub memory_size: Option<usize>,
    pub support_grid: bool,
}

/// Per-frame accounting for the profiler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepStats {
    pub transient_floats: usize,
    pub active: usize,
}

pub struct TrackerSession<'m> {
    model: &'m TrackerModel,
    queries: Vec<QuerySpec>,
    emitted: usize,
    memory: QueryMemory,
    q_init: Vec<Option<Vec<f32>>>,
    next: usize,
    last: StepStats,
}

impl<'m> TrackerSession<'m> {
    pub fn new(model: &'m TrackerModel, queries: &[QuerySpec], opts: SessionOptions) -> Result<Self> {
        let cfg = &model.config;
        for q in queries {
            QuerySpec::new(q.start, q.x, q.y, cfg.frame_h, cfg.frame_w)?;
        }
        let mut all = queries.to_vec();
        if opts.support_grid {
            let (w, h) = (cfg.frame_w as f32, cfg.frame_h as f32);
            let n = SUPPORT_GRID as f32;
            for r in 0..SUPPORT_GRID {
                for c in 0..SUPPORT_GRID {
                    all.push(QuerySpec { start: 0, x: (c as f32 + 0.5) * w / n, y: (r as f32 + 0.5) * h / n });
                }
            }
        }
        let capacity = opts.memory_size.unwrap_or(cfg.memory_len);
        let memory = QueryMemory::new(all.len(), capacity, cfg.dim, cfg.memory_len)?;
        Ok(TrackerSession {
            model,
            emitted: queries.len(),
            q_init: vec![None; all.len()],
            queries: all,
            memory,
            next: 0,
            last: StepStats::default(),
        })
    }

    pub fn memory(&self) -> &QueryMemory {
        &self.memory
    }

    /// Total queries including the support grid.
    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn next_frame(&self) -> usize {
        self.next
    }

    pub fn last_stats(&self) -> StepStats {
        self.last
    }

    /// Floats alive between frames: parameters, memory slots and cached
    /// initial queries.
    pub fn persistent_floats(&self) -> usize {
        self.model.num_params() + self.memory.num_floats() + self.queries.len() * self.model.config.dim
    }

    /// Consumes frame `t`, which must follow the previous one, and returns
    /// predictions for user queries with `start ≤ t`.
    pub fn step(&mut self, frame: &Frame) -> Result<Vec<(usize, TrackPrediction)>> {
        let cfg = &self.model.config;
        if frame.index != self.next {
            return Err(Error::Sequence { expected: self.next, got: frame.index });
        }
        if frame.height != cfg.frame_h || frame.width != cfg.frame_w {
            return Err(shape_err!("frame {}x{} but session expects {}x{}", frame.height, frame.width, cfg.frame_h, cfg.frame_w));
        }
        let t = frame.index;
        let ps = &self.model.params;
        let mut g = Graph::new();
        let pyramid = self.model.encoder.encode(&mut g, ps, frame)?;
        let starting: Vec<usize> = (0..self.queries.len()).filter(|&i| self.queries[i].start == t).collect();
        if !starting.is_empty() {
            let pos: Vec<(f32, f32)> = starting.iter().map(|&i| (self.queries[i].x, self.queries[i].y)).collect();
            let q = init_queries(&mut g, pyramid.fused, &pos)?;
            for (j, &i) in starting.iter().enumerate() {
                self.q_init[i] = Some(g.value(q).row(j).to_vec());
            }
        }
        let active: Vec<usize> = (0..self.queries.len()).filter(|&i| self.q_init[i].is_some()).collect();
        self.next += 1;
        if active.is_empty() {
            self.last = StepStats { transient_floats: g.transient_floats(), active: 0 };
            return Ok(Vec::new());
        }
        let d = cfg.dim;
        let q0: Vec<f32> = active.iter().flat_map(|&i| self.q_init[i].clone().expect("active")).collect();
        let q_init = g.constant(Tensor::new([active.len(), d], q0)?)?;
        let raw = g.constant(self.memory.raw_rows_for(&active))?;
        let mask = self.memory.ring().key_mask_for(&active);
        let gamma = g.constant(extend_ime(ps.tensor(self.model.gamma.table), self.memory.capacity())?)?;
        let input = FrameInput { pyramid, q_init, memory: Some((raw, &mask)), gamma };
        let fwd = self.model.forward_frame(&mut g, input, 0.0, &mut ChaCha8Rng::seed_from_u64(0))?;
        let preds = fwd.predictions(&g);
        self.memory.push_rows(g.value(fwd.query()), &active)?;
        self.last = StepStats { transient_floats: g.transient_floats(), active: active.len() };
        Ok(active.into_iter().zip(preds).filter(|(i, _)| *i < self.emitted).collect())
    }
}
