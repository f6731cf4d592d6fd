//! Training: full-clip unroll with gradients through memory, AdamW steps,
//! JSON-lines logging and checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::Config;
use super::model::{FrameInput, TrackerModel};
use super::optim::{clip_global_norm, learning_rate, AdamW};
use crate::data::{make_training_clip, query_track, sample_frames, sample_queries, ClipReader, ClipSample, SceneConfig};
use crate::encoder::init_queries;
use crate::error::{Error, Result};
use crate::heads::TrackPrediction;
use crate::loss::{make_targets, Geometry, GroundTruthTrack, LossBreakdown, PredictionSnapshot, TermSums};
use crate::memory::MemoryTape;
use crate::numerics::{Graph, Var};

/// Where training clips come from.
pub enum DataSource {
    /// Scenes `base_seed .. base_seed + scenes`, rendered on demand.
    Generated { scene: SceneConfig, base_seed: u64, scenes: usize },
    /// Clip directories written by [`crate::data::write_clip`].
    Stored(Vec<(ClipReader, GroundTruthTrack)>),
}

impl DataSource {
    pub fn generated(cfg: &Config) -> Self {
        DataSource::Generated {
            scene: SceneConfig::desk().with_size(cfg.frame_h, cfg.frame_w),
            base_seed: cfg.seed,
            scenes: cfg.train_scenes,
        }
    }

    /// Every subdirectory of `dir` holding a `manifest.json`, in name order.
    pub fn open_dir(dir: &Path) -> Result<Self> {
        let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").is_file())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::Param(format!("no clips under {}", dir.display())));
        }
        let clips = dirs
            .iter()
            .map(|d| {
                let r = ClipReader::open(d)?;
                let t = r.tracks()?;
                Ok((r, t))
            })
            .collect::<Result<_>>()?;
        Ok(DataSource::Stored(clips))
    }

    pub fn sample(&self, cfg: &Config, rng: &mut impl Rng) -> Result<ClipSample> {
        match self {
            DataSource::Generated { scene, base_seed, scenes } => {
                let seed = base_seed + rng.random_range(0..*scenes as u64);
                make_training_clip(seed, scene, cfg.clip_len, cfg.sampling_strategy, cfg.sampling_ratio, cfg.max_queries, rng)
            }
            DataSource::Stored(clips) => {
                let (reader, track) = &clips[rng.random_range(0..clips.len())];
                let m = &reader.manifest;
                if m.height != cfg.frame_h || m.width != cfg.frame_w {
                    return Err(Error::Shape(format!("clip is {}x{}, config wants {}x{}", m.height, m.width, cfg.frame_h, cfg.frame_w)));
                }
                let source_frames = sample_frames(m.frames, cfg.clip_len, cfg.sampling_strategy, cfg.sampling_ratio, rng)?;
                let window = window_track(track, &source_frames);
                let qs = sample_queries(&window, cfg.max_queries, rng);
                let frames = source_frames
                    .iter()
                    .enumerate()
                    .map(|(k, &f)| {
                        let mut fr = reader.frame(f)?;
                        fr.index = k;
                        Ok(fr)
                    })
                    .collect::<Result<_>>()?;
                Ok(ClipSample {
                    seed: m.seed,
                    frames,
                    queries: qs.iter().map(|q| q.spec).collect(),
                    track: query_track(&window, &qs),
                    strategy: cfg.sampling_strategy,
                    ratio: cfg.sampling_ratio,
                    source_frames,
                })
            }
        }
    }
}

fn window_track(track: &GroundTruthTrack, frames: &[usize]) -> GroundTruthTrack {
    let n = track.queries;
    let positions = (0..n).flat_map(|i| frames.iter().map(move |&f| track.position(i, f))).collect();
    let visible = (0..n).flat_map(|i| frames.iter().map(move |&f| track.is_visible(i, f))).collect();
    let starts = (0..n)
        .map(|i| frames.iter().position(|&f| track.is_visible(i, f)).unwrap_or(frames.len()))
        .collect();
    GroundTruthTrack::new(frames.len(), positions, visible, starts).expect("window sizes match")
}

/// Result of unrolling one clip.
pub struct ClipRun {
    pub graph: Graph,
    pub loss: Option<(Var, LossBreakdown)>,
    /// Per frame, the active query ids with their predictions.
    pub predictions: Vec<Vec<(usize, TrackPrediction)>>,
    pub pairs: usize,
}

/// Runs the online loop over a whole clip on one graph so the loss at later
/// frames reaches earlier frames through memory.
pub fn unroll_clip(model: &TrackerModel, clip: &ClipSample, key_drop: f32, rng: &mut impl Rng) -> Result<ClipRun> {
    let cfg = &model.config;
    let ps = &model.params;
    let n = clip.queries.len();
    let d = cfg.dim;
    let geom = Geometry { height: cfg.frame_h, width: cfg.frame_w, delta_u: cfg.delta_u_px() };
    let mut g = Graph::new();
    let gamma = g.param(ps, model.gamma.table);
    let mut tape = MemoryTape::new(n, cfg.memory_len, d)?;
    let mut init_src: Vec<Var> = Vec::new();
    let mut init_of: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut sums = TermSums::default();
    let mut predictions = Vec::with_capacity(clip.frames.len());
    for (t, frame) in clip.frames.iter().enumerate() {
        let pyramid = model.encoder.encode(&mut g, ps, frame)?;
        let starting: Vec<usize> = (0..n).filter(|&i| clip.queries[i].start == t).collect();
        if !starting.is_empty() {
            let pos: Vec<(f32, f32)> = starting.iter().map(|&i| (clip.queries[i].x, clip.queries[i].y)).collect();
            let q = init_queries(&mut g, pyramid.fused, &pos)?;
            for (j, &i) in starting.iter().enumerate() {
                init_of[i] = Some((init_src.len(), j));
            }
            init_src.push(q);
        }
        let active: Vec<usize> = (0..n).filter(|&i| init_of[i].is_some()).collect();
        if active.is_empty() {
            predictions.push(Vec::new());
            continue;
        }
        let q_init = g.gather_rows_multi(&init_src, active.iter().map(|&i| init_of[i]).collect(), d)?;
        let raw = tape.raw_rows_for(&mut g, &active)?;
        let mask = tape.ring().key_mask_for(&active);
        let input = FrameInput { pyramid, q_init, memory: Some((raw, &mask)), gamma };
        let fwd = model.forward_frame(&mut g, input, key_drop, rng)?;
        let preds = fwd.predictions(&g);

        let gt = clip.track.permuted(&active);
        let centers: Vec<(f32, f32)> = preds.iter().map(|p| p.patch_center).collect();
        let finals: Vec<(f32, f32)> = preds.iter().map(|p| p.position).collect();
        let snap = PredictionSnapshot { patch_centers: &centers, positions: &finals, topk: &fwd.rerank.topk.indices, k: fwd.rerank.topk.k };
        let targets = make_targets(&gt, t, &snap, &geom)?;
        sums.add_frame(&mut g, &fwd.head_outputs(), &targets)?;

        let q = fwd.query();
        let entry = if cfg.detach_memory { g.constant(g.value(q).clone())? } else { q };
        tape.push_rows(&g, entry, &active)?;
        predictions.push(active.into_iter().zip(preds).collect());
    }
    let pairs = sums.pairs;
    let loss = sums.assemble(&mut g, cfg.lambda)?;
    Ok(ClipRun { graph: g, loss, predictions, pairs })
}

/// Per-step generator, a pure function of `(seed, step)`.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0000_0000);
    r.set_stream(step as u64 + 1);
    r
}

#[derive(Clone, Debug, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f32,
    pub grad_norm: f32,
    pub pairs: usize,
    pub seconds: f64,
    pub seeds: Vec<u64>,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub struct Trainer {
    pub model: TrackerModel,
    pub opt: AdamW,
    pub step: usize,
    source: DataSource,
}

impl Trainer {
    pub fn new(config: &Config, source: DataSource) -> Result<Self> {
        let model = TrackerModel::new(config)?;
        let opt = AdamW::new(&model.params, config.weight_decay);
        Ok(Trainer { model, opt, step: 0, source })
    }

    pub fn resume(ck: &Checkpoint, source: DataSource) -> Result<Self> {
        let model = ck.model()?;
        let opt = ck.optimizer(&model)?.unwrap_or_else(|| AdamW::new(&model.params, model.config.weight_decay));
        Ok(Trainer { model, opt, step: ck.step as usize, source })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, Some(&self.opt), self.step as u64)
    }

    /// Batch loss without updating anything.
    pub fn batch_loss(&self, step: usize) -> Result<f32> {
        let cfg = &self.model.config;
        let mut rng = step_rng(cfg.seed, step);
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let clip = self.source.sample(cfg, &mut rng)?;
            let run = unroll_clip(&self.model, &clip, cfg.key_drop, &mut rng)?;
            total += run.loss.map_or(0.0, |(_, bd)| bd.total);
        }
        Ok(total / cfg.batch as f32)
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let started = Instant::now();
        let cfg = self.model.config.clone();
        let mut rng = step_rng(cfg.seed, self.step);
        let mut grads: Vec<Vec<f32>> = self.model.params.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        let mut loss = LossBreakdown::default();
        let mut pairs = 0;
        let mut seeds = Vec::with_capacity(cfg.batch);
        let inv = 1.0 / cfg.batch as f32;
        for _ in 0..cfg.batch {
            let clip = self.source.sample(&cfg, &mut rng)?;
            seeds.push(clip.seed);
            let run = unroll_clip(&self.model, &clip, cfg.key_drop, &mut rng).map_err(|e| self.nonfinite(e, &seeds))?;
            pairs += run.pairs;
            if let Some((l, bd)) = run.loss {
                if !bd.total.is_finite() {
                    return Err(self.nonfinite(Error::Numeric("non-finite loss".into()), &seeds));
                }
                let g = run.graph.backward(l)?;
                for (id, gr) in g.params() {
                    grads[id.index()].iter_mut().zip(gr).for_each(|(a, b)| *a += inv * b);
                }
                add_scaled(&mut loss, &bd, inv);
            }
        }
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(self.nonfinite(Error::Numeric("non-finite gradient".into()), &seeds));
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = learning_rate(self.step, cfg.steps, cfg.lr, cfg.warmup_frac);
        self.opt.step(&mut self.model.params, &grads, lr);
        let report = StepReport { step: self.step, lr, grad_norm, pairs, seconds: started.elapsed().as_secs_f64(), seeds, loss };
        self.step += 1;
        Ok(report)
    }

    fn nonfinite(&self, e: Error, seeds: &[u64]) -> Error {
        match e {
            Error::Numeric(m) => Error::Numeric(format!("step {}: {m} (batch scene seeds {seeds:?})", self.step)),
            other => other,
        }
    }

    /// Trains to `config.steps`, appending to `out/train_log.jsonl` and
    /// writing `out/checkpoint.tron` periodically and at the end.
    pub fn run(&mut self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let log_path = out.join("train_log.jsonl");
        let f = OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(f);
        let ck_path = out.join("checkpoint.tron");
        let cfg = self.model.config.clone();
        while self.step < cfg.steps {
            let report = match self.train_step() {
                Ok(r) => r,
                Err(e) => {
                    let dump = out.join(format!("failure-step{}.txt", self.step));
                    let mut f = File::create(&dump).map_err(|io| Error::io(&dump, io))?;
                    writeln!(f, "{e}").map_err(|io| Error::io(&dump, io))?;
                    return Err(e);
                }
            };
            if report.step % cfg.log_every.max(1) == 0 || self.step == cfg.steps {
                serde_json::to_writer(&mut log, &report)?;
                writeln!(log).map_err(|e| Error::io(&log_path, e))?;
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                log::info!("step {} loss {:.4} lr {:.2e} {:.2}s", report.step, report.loss.total, report.lr, report.seconds);
            }
            if cfg.checkpoint_every > 0 && self.step % cfg.checkpoint_every == 0 {
                self.checkpoint().save(&ck_path)?;
            }
        }
        self.checkpoint().save(&ck_path)
    }
}

fn add_scaled(acc: &mut LossBreakdown, x: &LossBreakdown, s: f32) {
    acc.total += s * x.total;
    acc.patch_refined += s * x.patch_refined;
    acc.patch_decoder += s * x.patch_decoder;
    acc.offset += s * x.offset;
    acc.visibility += s * x.visibility;
    acc.uncertainty += s * x.uncertainty;
    acc.topk_uncertainty += s * x.topk_uncertainty;
    acc.topk_score += s * x.topk_score;
}
