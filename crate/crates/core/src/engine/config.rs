//! Flat `key = value` configuration with named presets.

use std::fmt::Write as _;

use crate::data::SamplingStrategy;
use crate::error::{Error, Result};

/// Reference frame width for `delta_u`.
const DELTA_U_REFERENCE_WIDTH: f32 = 512.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub frame_h: usize,
    pub frame_w: usize,
    pub dim: usize,
    pub heads: usize,
    pub decoder_blocks: usize,
    pub deform_points: usize,
    pub memory_len: usize,
    pub clip_len: usize,
    pub topk: usize,
    pub tau: f32,
    pub delta_v: f32,
    /// At 512 px width; scaled with the frame width.
    pub delta_u: f32,
    pub lambda: f32,
    pub key_drop: f32,
    pub use_memory: bool,
    pub detach_memory: bool,
    pub sampling_strategy: SamplingStrategy,
    pub sampling_ratio: f32,
    pub lr: f32,
    pub weight_decay: f32,
    pub grad_clip: f32,
    pub warmup_frac: f32,
    pub steps: usize,
    pub batch: usize,
    pub max_queries: usize,
    pub train_scenes: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config::desk()
    }
}

impl Config {
    /// 96×128 single-CPU preset.
    pub fn desk() -> Self {
        Config {
            frame_h: 96,
            frame_w: 128,
            dim: 64,
            heads: 4,
            decoder_blocks: 3,
            deform_points: 4,
            memory_len: 8,
            clip_len: 16,
            topk: 16,
            tau: 0.05,
            delta_v: 0.8,
            delta_u: 12.0,
            lambda: 3.0,
            key_drop: 0.1,
            use_memory: true,
            detach_memory: false,
            sampling_strategy: SamplingStrategy::Uniform,
            sampling_ratio: 1.0,
            lr: 5e-4,
            weight_decay: 1e-5,
            grad_clip: 1.0,
            warmup_frac: 0.01,
            steps: 20_000,
            batch: 4,
            max_queries: 32,
            train_scenes: 500,
            checkpoint_every: 1000,
            log_every: 10,
            seed: 0,
        }
    }

    /// Full-resolution preset.
    pub fn full_res() -> Self {
        Config {
            frame_h: 384,
            frame_w: 512,
            dim: 256,
            heads: 8,
            memory_len: 24,
            clip_len: 48,
            sampling_ratio: 2.0,
            steps: 36_000,
            batch: 32,
            max_queries: 384,
            train_scenes: 10_000,
            ..Config::desk()
        }
    }

    /// Smallest working model, for smoke runs and tests.
    pub fn tiny() -> Self {
        Config {
            frame_h: 64,
            frame_w: 64,
            dim: 16,
            heads: 2,
            decoder_blocks: 1,
            deform_points: 2,
            memory_len: 4,
            clip_len: 6,
            topk: 4,
            steps: 20,
            batch: 2,
            max_queries: 8,
            train_scenes: 8,
            checkpoint_every: 10,
            log_every: 1,
            ..Config::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Config::desk()),
            "tiny" => Ok(Config::tiny()),
            "paper-384x512" => Ok(Config::full_res()),
            _ => Err(Error::Config(format!("unknown preset {name:?}"))),
        }
    }

    /// Uncertainty threshold in working-resolution pixels.
    pub fn delta_u_px(&self) -> f32 {
        self.delta_u * self.frame_w as f32 / DELTA_U_REFERENCE_WIDTH
    }

    /// Parses `key = value` lines; `#` starts a comment. A `preset` key, if
    /// present, must come first and selects the base values.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::desk();
        let mut seen_other = false;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                if seen_other {
                    return Err(Error::Config(format!("line {}: preset must precede other keys", ln + 1)));
                }
                cfg = Config::preset(v)?;
                continue;
            }
            seen_other = true;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", ln + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, k: &str, v: &str) -> std::result::Result<(), String> {
        fn p<T: std::str::FromStr>(k: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?} for {k}"))
        }
        match k {
            "frame_h" => self.frame_h = p(k, v)?,
            "frame_w" => self.frame_w = p(k, v)?,
            "dim" => self.dim = p(k, v)?,
            "heads" => self.heads = p(k, v)?,
            "decoder_blocks" => self.decoder_blocks = p(k, v)?,
            "deform_points" => self.deform_points = p(k, v)?,
            "memory_len" => self.memory_len = p(k, v)?,
            "clip_len" => self.clip_len = p(k, v)?,
            "topk" => self.topk = p(k, v)?,
            "tau" => self.tau = p(k, v)?,
            "delta_v" => self.delta_v = p(k, v)?,
            "delta_u" => self.delta_u = p(k, v)?,
            "lambda" => self.lambda = p(k, v)?,
            "key_drop" => self.key_drop = p(k, v)?,
            "use_memory" => self.use_memory = p(k, v)?,
            "detach_memory" => self.detach_memory = p(k, v)?,
            "sampling_strategy" => self.sampling_strategy = v.parse().map_err(|e: Error| e.to_string())?,
            "sampling_ratio" => self.sampling_ratio = p(k, v)?,
            "lr" => self.lr = p(k, v)?,
            "weight_decay" => self.weight_decay = p(k, v)?,
            "grad_clip" => self.grad_clip = p(k, v)?,
            "warmup_frac" => self.warmup_frac = p(k, v)?,
            "steps" => self.steps = p(k, v)?,
            "batch" => self.batch = p(k, v)?,
            "max_queries" => self.max_queries = p(k, v)?,
            "train_scenes" => self.train_scenes = p(k, v)?,
            "checkpoint_every" => self.checkpoint_every = p(k, v)?,
            "log_every" => self.log_every = p(k, v)?,
            "seed" => self.seed = p(k, v)?,
            _ => return Err(format!("unknown key {k:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        crate::encoder::check_frame_size(self.frame_h, self.frame_w).map_err(|e| Error::Config(e.to_string()))?;
        if self.dim == 0 || self.dim % 4 != 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be a positive multiple of 4 and of heads");
        }
        if self.memory_len == 0 || self.clip_len == 0 || self.batch == 0 || self.max_queries == 0 {
            return bad("memory_len, clip_len, batch and max_queries must be positive");
        }
        if self.topk == 0 || self.topk > (self.frame_h / 4) * (self.frame_w / 4) {
            return bad("topk must lie in 1..=P");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(0.0..1.0).contains(&self.key_drop) {
            return bad("key_drop must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.delta_v) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("delta_v and warmup_frac must lie in [0, 1]");
        }
        if self.decoder_blocks == 0 || self.deform_points == 0 || self.train_scenes == 0 {
            return bad("decoder_blocks, deform_points and train_scenes must be positive");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let strategy = match self.sampling_strategy {
            SamplingStrategy::Uniform => "uniform",
            SamplingStrategy::Random => "random",
        };
        let pairs: [(&str, String); 29] = [
            ("frame_h", self.frame_h.to_string()),
            ("frame_w", self.frame_w.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("decoder_blocks", self.decoder_blocks.to_string()),
            ("deform_points", self.deform_points.to_string()),
            ("memory_len", self.memory_len.to_string()),
            ("clip_len", self.clip_len.to_string()),
            ("topk", self.topk.to_string()),
            ("tau", self.tau.to_string()),
            ("delta_v", self.delta_v.to_string()),
            ("delta_u", self.delta_u.to_string()),
            ("lambda", self.lambda.to_string()),
            ("key_drop", self.key_drop.to_string()),
            ("use_memory", self.use_memory.to_string()),
            ("detach_memory", self.detach_memory.to_string()),
            ("sampling_strategy", strategy.to_string()),
            ("sampling_ratio", self.sampling_ratio.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("warmup_frac", self.warmup_frac.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("max_queries", self.max_queries.to_string()),
            ("train_scenes", self.train_scenes.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
