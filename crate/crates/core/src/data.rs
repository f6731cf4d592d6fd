//! Synthetic sprite videos with exact trajectories and occlusion, frame and
//! query sampling, and the on-disk clip format.

use std::f32::consts::{PI, TAU};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{check_frame_size, Frame, QuerySpec};
use crate::error::{Error, Result};
use crate::loss::GroundTruthTrack;

/// Length of generated source videos.
pub const SOURCE_FRAMES: usize = 120;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    /// Whether local point `(u, v)` lies at least `margin` inside a shape of
    /// circumradius `r`.
    pub fn contains(self, u: f32, v: f32, r: f32, margin: f32) -> bool {
        match self {
            Shape::Disk => {
                let rr = r - margin;
                rr > 0.0 && u * u + v * v < rr * rr
            }
            Shape::Square => {
                let h = r * std::f32::consts::FRAC_1_SQRT_2 - margin;
                u.abs() < h && v.abs() < h
            }
            Shape::Triangle => {
                // Edge normals at 90°, 210° and 330°; inradius is r/2.
                let lim = 0.5 * r - margin;
                [PI / 2.0, 7.0 * PI / 6.0, 11.0 * PI / 6.0].iter().all(|a| u * a.cos() + v * a.sin() < lim)
            }
        }
    }
}

/// Reflects `x` into `[lo, hi]`.
fn reflect(x: f32, lo: f32, hi: f32) -> f32 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (x - lo).rem_euclid(2.0 * span);
    lo + if m > span { 2.0 * span - m } else { m }
}

/// Drift plus a sinusoidal wobble, reflected into a box; constant spin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: [f32; 2],
    pub velocity: [f32; 2],
    pub wobble: [f32; 2],
    pub wobble_freq: f32,
    pub wobble_phase: f32,
    pub angle: f32,
    pub spin: f32,
    pub bounds: [f32; 4],
}

impl Trajectory {
    pub fn center(&self, t: f32) -> [f32; 2] {
        let s = (self.wobble_freq * t + self.wobble_phase).sin() - self.wobble_phase.sin();
        let x = self.start[0] + self.velocity[0] * t + self.wobble[0] * s;
        let y = self.start[1] + self.velocity[1] * t + self.wobble[1] * s;
        [reflect(x, self.bounds[0], self.bounds[2]), reflect(y, self.bounds[1], self.bounds[3])]
    }

    pub fn rotation(&self, t: f32) -> f32 {
        self.angle + self.spin * t
    }

    /// World position at `t` of sprite-local point `(u, v)`.
    pub fn to_world(&self, t: f32, u: f32, v: f32) -> [f32; 2] {
        let c = self.center(t);
        let (s, co) = self.rotation(t).sin_cos();
        [c[0] + co * u - s * v, c[1] + s * u + co * v]
    }

    pub fn to_local(&self, t: f32, x: f32, y: f32) -> (f32, f32) {
        let c = self.center(t);
        let (s, co) = self.rotation(t).sin_cos();
        let (dx, dy) = (x - c[0], y - c[1]);
        (co * dx + s * dy, -s * dx + co * dy)
    }
}

/// Stripe texture whose colours and contrast drift over time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub color_a: [f32; 3],
    pub color_b: [f32; 3],
    pub stripe_freq: f32,
    pub stripe_angle: f32,
    pub contrast: f32,
    pub spot: [f32; 2],
    /// Frames over which colour moves from `color_a` to `color_b` and back.
    pub drift_period: f32,
}

impl Texture {
    pub fn color(&self, t: f32, u: f32, v: f32) -> [f32; 3] {
        let mix = 0.5 - 0.5 * (TAU * t / self.drift_period).cos();
        let contrast = self.contrast * (TAU * t / (2.0 * self.drift_period)).cos();
        let (s, c) = self.stripe_angle.sin_cos();
        let stripe = (self.stripe_freq * (c * u + s * v)).sin();
        let du = u - self.spot[0];
        let dv = v - self.spot[1];
        let spot = (-(du * du + dv * dv) / 6.0).exp();
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let base = self.color_a[ch] + mix * (self.color_b[ch] - self.color_a[ch]);
            out[ch] = (base + contrast * stripe + 0.35 * spot * (1.0 - 2.0 * base)).clamp(0.0, 1.0);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: Shape,
    pub radius: f32,
    /// Smaller is nearer; distinct across sprites.
    pub depth: usize,
    pub texture: Texture,
    pub path: Trajectory,
}

impl Sprite {
    pub fn covers(&self, t: f32, x: f32, y: f32) -> bool {
        let (u, v) = self.path.to_local(t, x, y);
        self.shape.contains(u, v, self.radius, 0.0)
    }
}

/// Gratings and blobs on an infinite plane that pans with the camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [f32; 3],
    /// `(fx, fy, phase, amplitude, channel weights)` per grating.
    pub gratings: Vec<([f32; 3], [f32; 3])>,
    /// `(x, y, sigma², colour offset)` per blob.
    pub blobs: Vec<([f32; 3], [f32; 3])>,
    pub pan: [f32; 2],
}

impl Background {
    /// World-plane colour.
    pub fn world_color(&self, x: f32, y: f32) -> [f32; 3] {
        let mut c = self.base;
        for (g, w) in &self.gratings {
            let s = (g[0] * x + g[1] * y + g[2]).sin();
            for ch in 0..3 {
                c[ch] += w[ch] * s;
            }
        }
        for (b, col) in &self.blobs {
            let d2 = (x - b[0]).powi(2) + (y - b[1]).powi(2);
            if d2 < 9.0 * b[2] {
                let w = (-d2 / b[2]).exp();
                for ch in 0..3 {
                    c[ch] += w * col[ch];
                }
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }

    /// Frame position at `t` of the world point seen at `p` on frame 0.
    pub fn track(&self, t: f32, p: [f32; 2]) -> [f32; 2] {
        [p[0] - self.pan[0] * t, p[1] - self.pan[1] * t]
    }
}

/// A tracked point, anchored to a sprite texture or to the background.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Anchor {
    Sprite { sprite: usize, local: [f32; 2] },
    Background { origin: [f32; 2] },
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub min_sprites: usize,
    pub max_sprites: usize,
    pub points_per_sprite: usize,
    pub background_points: usize,
    pub max_speed: f32,
    pub max_pan: f32,
    pub twin_prob: f32,
    pub min_drift_period: f32,
}

impl SceneConfig {
    pub fn desk() -> Self {
        SceneConfig {
            height: 96,
            width: 128,
            frames: SOURCE_FRAMES,
            min_sprites: 3,
            max_sprites: 6,
            points_per_sprite: 6,
            background_points: 16,
            max_speed: 6.0,
            max_pan: 1.0,
            twin_prob: 0.5,
            min_drift_period: 40.0,
        }
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteScene {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background: Background,
    pub sprites: Vec<Sprite>,
    pub points: Vec<Anchor>,
}

fn rand_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

fn rand_texture(rng: &mut impl Rng, min_period: f32) -> Texture {
    Texture {
        color_a: rand_color(rng),
        color_b: rand_color(rng),
        stripe_freq: rng.random_range(0.4..1.4),
        stripe_angle: rng.random_range(0.0..PI),
        contrast: rng.random_range(0.08..0.2),
        spot: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
        drift_period: rng.random_range(min_period..3.0 * min_period),
    }
}

impl SpriteScene {
    pub fn generate(seed: u64, cfg: &SceneConfig) -> Result<Self> {
        check_frame_size(cfg.height, cfg.width)?;
        if cfg.min_sprites > cfg.max_sprites || cfg.frames == 0 {
            return Err(Error::Param("scene config: bad sprite range or zero frames".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (cfg.width as f32, cfg.height as f32);
        let scale = h / 96.0;
        let background = Background {
            base: rand_color(&mut rng),
            gratings: (0..6)
                .map(|_| {
                    let f = rng.random_range(0.05..0.5) / scale;
                    let a = rng.random_range(0.0..TAU);
                    let amp = rng.random_range(0.03..0.1);
                    let g = [f * a.cos(), f * a.sin(), rng.random_range(0.0..TAU)];
                    let wgt = [0, 1, 2].map(|_| amp * rng.random_range(-1.0f32..1.0));
                    (g, wgt)
                })
                .collect(),
            blobs: (0..40)
                .map(|_| {
                    let b = [
                        rng.random_range(-0.5 * w..1.5 * w),
                        rng.random_range(-0.5 * h..1.5 * h),
                        (rng.random_range(2.0f32..6.0) * scale).powi(2),
                    ];
                    let col = [0, 1, 2].map(|_| rng.random_range(-0.35f32..0.35));
                    (b, col)
                })
                .collect(),
            pan: {
                let a = rng.random_range(0.0..TAU);
                let s = rng.random_range(0.0..=cfg.max_pan) * scale;
                [s * a.cos(), s * a.sin()]
            },
        };
        let n = rng.random_range(cfg.min_sprites..=cfg.max_sprites);
        let mut sprites: Vec<Sprite> = Vec::with_capacity(n);
        let mut depths: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            depths.swap(i, rng.random_range(0..=i));
        }
        for &depth in depths.iter() {
            let twin = !sprites.is_empty() && rng.random::<f32>() < cfg.twin_prob;
            let (shape, radius, texture) = if twin {
                let src = sprites[rng.random_range(0..sprites.len())];
                (src.shape, src.radius, src.texture)
            } else {
                let shape = [Shape::Disk, Shape::Square, Shape::Triangle][rng.random_range(0..3)];
                (shape, rng.random_range(7.0..14.0) * scale, rand_texture(&mut rng, cfg.min_drift_period))
            };
            let speed = rng.random_range(0.0..0.6 * cfg.max_speed) * scale;
            let dir = rng.random_range(0.0..TAU);
            let wobble_freq = rng.random_range(0.05..0.25);
            let wobble_max = 0.2 * cfg.max_speed * scale / wobble_freq;
            let margin = 0.5 * radius;
            let bounds = [margin, margin, w - margin, h - margin];
            sprites.push(Sprite {
                shape,
                radius,
                depth,
                texture,
                path: Trajectory {
                    start: [rng.random_range(bounds[0]..bounds[2]), rng.random_range(bounds[1]..bounds[3])],
                    velocity: [speed * dir.cos(), speed * dir.sin()],
                    wobble: [rng.random_range(0.0..wobble_max), rng.random_range(0.0..wobble_max)],
                    wobble_freq,
                    wobble_phase: rng.random_range(0.0..TAU),
                    angle: rng.random_range(0.0..TAU),
                    spin: rng.random_range(-0.04..0.04),
                    bounds,
                },
            });
        }
        let mut points = Vec::new();
        for (si, s) in sprites.iter().enumerate() {
            let mut got = 0;
            for _ in 0..1000 {
                if got == cfg.points_per_sprite {
                    break;
                }
                let (u, v) = (rng.random_range(-s.radius..s.radius), rng.random_range(-s.radius..s.radius));
                if s.shape.contains(u, v, s.radius, 1.5) {
                    points.push(Anchor::Sprite { sprite: si, local: [u, v] });
                    got += 1;
                }
            }
        }
        for _ in 0..cfg.background_points {
            points.push(Anchor::Background { origin: [rng.random_range(0.0..w), rng.random_range(0.0..h)] });
        }
        Ok(SpriteScene { seed, height: cfg.height, width: cfg.width, frames: cfg.frames, background, sprites, points })
    }

    fn by_depth(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.sprites.len()).collect();
        order.sort_by_key(|&i| self.sprites[i].depth);
        order
    }

    pub fn render_frame(&self, t: usize) -> Result<Frame> {
        let (h, w) = (self.height, self.width);
        let tf = t as f32;
        let order = self.by_depth();
        let [px, py] = [self.background.pan[0] * tf, self.background.pan[1] * tf];
        let mut rgb = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = (x as f32 + 0.5, y as f32 + 0.5);
                let hit = order.iter().map(|&i| &self.sprites[i]).find(|s| s.covers(tf, cx, cy));
                let c = match hit {
                    Some(s) => {
                        let (u, v) = s.path.to_local(tf, cx, cy);
                        s.texture.color(tf, u, v)
                    }
                    None => self.background.world_color(cx + px, cy + py),
                };
                rgb.extend_from_slice(&c);
            }
        }
        Frame::new(t, h, w, rgb)
    }

    pub fn point_position(&self, point: usize, t: usize) -> [f32; 2] {
        match self.points[point] {
            Anchor::Sprite { sprite, local } => self.sprites[sprite].path.to_world(t as f32, local[0], local[1]),
            Anchor::Background { origin } => self.background.track(t as f32, origin),
        }
    }

    /// Visible iff inside the frame and no strictly nearer sprite covers the
    /// centre of the pixel holding the point.
    pub fn point_visible(&self, point: usize, t: usize) -> bool {
        let p = self.point_position(point, t);
        if !(p[0] >= 0.0 && p[0] < self.width as f32 && p[1] >= 0.0 && p[1] < self.height as f32) {
            return false;
        }
        let (cx, cy) = (p[0].floor() + 0.5, p[1].floor() + 0.5);
        let own_depth = match self.points[point] {
            Anchor::Sprite { sprite, .. } => self.sprites[sprite].depth,
            Anchor::Background { .. } => usize::MAX,
        };
        !self.sprites.iter().any(|s| s.depth < own_depth && s.covers(t as f32, cx, cy))
    }

    /// Every point over every frame; starts are first visible frames.
    pub fn tracks(&self) -> GroundTruthTrack {
        self.tracks_for(&(0..self.frames).collect::<Vec<_>>())
    }

    /// Tracks restricted to `frames`, re-indexed from 0.
    pub fn tracks_for(&self, frames: &[usize]) -> GroundTruthTrack {
        let n = self.points.len();
        let t = frames.len();
        let mut positions = Vec::with_capacity(n * t);
        let mut visible = Vec::with_capacity(n * t);
        let mut starts = Vec::with_capacity(n);
        for i in 0..n {
            let mut start = t;
            for (k, &f) in frames.iter().enumerate() {
                positions.push(self.point_position(i, f));
                let v = self.point_visible(i, f);
                if v && start == t {
                    start = k;
                }
                visible.push(v);
            }
            starts.push(start);
        }
        GroundTruthTrack::new(t, positions, visible, starts).expect("sizes match by construction")
    }
}

/// All frames and tracks of a scene.
pub fn render_scene(scene: &SpriteScene) -> Result<(Vec<Frame>, GroundTruthTrack)> {
    let frames = (0..scene.frames).map(|t| scene.render_frame(t)).collect::<Result<_>>()?;
    Ok((frames, scene.tracks()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    Uniform,
    Random,
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SamplingStrategy::Uniform),
            "random" => Ok(SamplingStrategy::Random),
            _ => Err(Error::Config(format!("unknown sampling strategy {s:?}"))),
        }
    }
}

/// Picks `t` frame indices from a `video_len` source with ratio `r`: a crop
/// of `⌈t·r⌉` frames starting at one of `video_len − ⌈t·r⌉` offsets (at
/// least one), then either stride `r` or `t` sorted distinct draws.
pub fn sample_frames(video_len: usize, t: usize, strategy: SamplingStrategy, ratio: f32, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if t == 0 || !(ratio >= 1.0) {
        return Err(Error::Param(format!("need T ≥ 1 and ratio ≥ 1, got T={t}, r={ratio}")));
    }
    let span = (t as f64 * ratio as f64).ceil() as usize;
    if span > video_len {
        return Err(Error::Param(format!("T·r = {} exceeds the {}-frame source", t as f32 * ratio, video_len)));
    }
    let offsets = (video_len - span).max(1);
    let o = rng.random_range(0..offsets);
    Ok(match strategy {
        SamplingStrategy::Uniform => (0..t).map(|i| o + (i as f64 * ratio as f64).floor() as usize).collect(),
        SamplingStrategy::Random => {
            let mut idx: Vec<usize> = sample(rng, span, t).into_iter().map(|i| o + i).collect();
            idx.sort_unstable();
            idx
        }
    })
}

/// A query together with the track point it follows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledQuery {
    pub point: usize,
    pub spec: QuerySpec,
}

/// Up to `n_max` queries: 75% start on the first or middle frame, the rest
/// on another visible frame. Points without an eligible frame are skipped.
pub fn sample_queries(track: &GroundTruthTrack, n_max: usize, rng: &mut impl Rng) -> Vec<SampledQuery> {
    let t = track.frames;
    let mid = t / 2;
    let mut order: Vec<usize> = (0..track.queries).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut out = Vec::new();
    for p in order {
        if out.len() == n_max {
            break;
        }
        let vis = |f: usize| track.is_visible(p, f);
        let start = if rng.random::<f32>() < 0.75 {
            let cands: Vec<usize> = [0, mid].into_iter().filter(|&f| f < t && vis(f)).collect::<Vec<_>>();
            let mut cands = cands;
            cands.dedup();
            match cands.len() {
                0 => None,
                n => Some(cands[rng.random_range(0..n)]),
            }
        } else {
            let others: Vec<usize> = (0..t).filter(|&f| f != 0 && f != mid && vis(f)).collect();
            (!others.is_empty()).then(|| others[rng.random_range(0..others.len())])
        };
        if let Some(s) = start {
            let [x, y] = track.position(p, s);
            out.push(SampledQuery { point: p, spec: QuerySpec { start: s, x, y } });
        }
    }
    out
}

/// Track rows for `queries`, with their start frames.
pub fn query_track(track: &GroundTruthTrack, queries: &[SampledQuery]) -> GroundTruthTrack {
    let order: Vec<usize> = queries.iter().map(|q| q.point).collect();
    let mut sub = track.permuted(&order);
    sub.starts = queries.iter().map(|q| q.spec.start).collect();
    GroundTruthTrack::new(sub.frames, sub.positions, sub.visible, sub.starts).expect("permuted sizes match")
}

/// Frames plus ground truth for one training or evaluation clip.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub seed: u64,
    pub frames: Vec<Frame>,
    pub queries: Vec<QuerySpec>,
    pub track: GroundTruthTrack,
    pub strategy: SamplingStrategy,
    pub ratio: f32,
    pub source_frames: Vec<usize>,
}

/// Renders the sampled window of scene `seed` and draws its queries.
#[allow(clippy::too_many_arguments)]
pub fn make_training_clip(
    seed: u64,
    cfg: &SceneConfig,
    t: usize,
    strategy: SamplingStrategy,
    ratio: f32,
    n_max: usize,
    rng: &mut impl Rng,
) -> Result<ClipSample> {
    let scene = SpriteScene::generate(seed, cfg)?;
    let source_frames = sample_frames(scene.frames, t, strategy, ratio, rng)?;
    let full = scene.tracks_for(&source_frames);
    let qs = sample_queries(&full, n_max, rng);
    let track = query_track(&full, &qs);
    let frames = source_frames
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            let mut fr = scene.render_frame(f)?;
            fr.index = k;
            Ok(fr)
        })
        .collect::<Result<_>>()?;
    Ok(ClipSample { seed, frames, queries: qs.iter().map(|q| q.spec).collect(), track, strategy, ratio, source_frames })
}

/// `manifest.json` of a stored clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dtype: String,
    pub frames: usize,
    pub tracks: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TracksFile {
    positions: Vec<Vec<[f32; 2]>>,
    visible: Vec<Vec<bool>>,
    starts: Vec<usize>,
}

/// One entry of `queries.json`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: usize,
    pub t: usize,
    pub x: f32,
    pub y: f32,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, value)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// Writes `manifest.json`, `frames.bin`, `tracks.json` and `queries.json`
/// (each track queried at its first visible frame).
pub fn write_clip(dir: &Path, seed: u64, frames: &[Frame], track: &GroundTruthTrack) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = frames.first().ok_or_else(|| Error::Param("clip has no frames".into()))?;
    if track.frames != frames.len() {
        return Err(Error::Param(format!("{} frames but tracks cover {}", frames.len(), track.frames)));
    }
    let manifest = Manifest {
        height: first.height,
        width: first.width,
        channels: 3,
        dtype: "float32-le".into(),
        frames: frames.len(),
        tracks: track.queries,
        seed,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    let path = dir.join("frames.bin");
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    for fr in frames {
        if fr.height != manifest.height || fr.width != manifest.width {
            return Err(Error::Shape(format!("frame {} is {}x{}, clip is {}x{}", fr.index, fr.height, fr.width, manifest.height, manifest.width)));
        }
        for v in &fr.rgb {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let (n, t) = (track.queries, track.frames);
    let tracks = TracksFile {
        positions: (0..n).map(|i| track.positions[i * t..(i + 1) * t].to_vec()).collect(),
        visible: (0..n).map(|i| track.visible[i * t..(i + 1) * t].to_vec()).collect(),
        starts: track.starts.clone(),
    };
    write_json(&dir.join("tracks.json"), &tracks)?;
    write_json(&dir.join("queries.json"), &queried_first(track))
}

/// One query per track at its first visible frame; never-visible tracks are skipped.
pub fn queried_first(track: &GroundTruthTrack) -> Vec<QueryRecord> {
    (0..track.queries)
        .filter(|&i| track.starts[i] < track.frames)
        .map(|i| {
            let [x, y] = track.position(i, track.starts[i]);
            QueryRecord { id: i, t: track.starts[i], x, y }
        })
        .collect()
}

/// A stored clip; frames are read on demand.
#[derive(Debug)]
pub struct ClipReader {
    pub manifest: Manifest,
    frames_path: std::path::PathBuf,
}

impl ClipReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        if manifest.channels != 3 || manifest.dtype != "float32-le" {
            return Err(Error::Format(format!("unsupported clip layout {} channels, {}", manifest.channels, manifest.dtype)));
        }
        check_frame_size(manifest.height, manifest.width)?;
        let frames_path = dir.join("frames.bin");
        let len = fs::metadata(&frames_path).map_err(|e| Error::io(&frames_path, e))?.len();
        let expect = (manifest.frames * manifest.height * manifest.width * 3 * 4) as u64;
        if len != expect {
            return Err(Error::Format(format!("frames.bin has {len} bytes, manifest implies {expect}")));
        }
        Ok(ClipReader { manifest, frames_path })
    }

    pub fn frame(&self, t: usize) -> Result<Frame> {
        let m = &self.manifest;
        if t >= m.frames {
            return Err(Error::Param(format!("frame {t} of a {}-frame clip", m.frames)));
        }
        let per = m.height * m.width * 3;
        let mut f = File::open(&self.frames_path).map_err(|e| Error::io(&self.frames_path, e))?;
        f.seek(SeekFrom::Start((t * per * 4) as u64)).map_err(|e| Error::io(&self.frames_path, e))?;
        let mut buf = vec![0u8; per * 4];
        f.read_exact(&mut buf).map_err(|e| Error::io(&self.frames_path, e))?;
        let rgb = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Frame::new(t, m.height, m.width, rgb)
    }

    pub fn frames(&self) -> Result<Vec<Frame>> {
        (0..self.manifest.frames).map(|t| self.frame(t)).collect()
    }

    pub fn tracks(&self) -> Result<GroundTruthTrack> {
        read_tracks(self.frames_path.parent().unwrap_or(Path::new(".")))
    }
}

pub fn read_tracks(dir: &Path) -> Result<GroundTruthTrack> {
    let tf: TracksFile = read_json(&dir.join("tracks.json"))?;
    let t = tf.positions.first().map_or(0, Vec::len);
    if tf.positions.iter().any(|r| r.len() != t) || tf.visible.iter().any(|r| r.len() != t) {
        return Err(Error::Format("tracks.json rows differ in length".into()));
    }
    GroundTruthTrack::new(t, tf.positions.concat(), tf.visible.concat(), tf.starts)
}

pub fn read_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    read_json(path)
}

pub fn write_queries(path: &Path, queries: &[QueryRecord]) -> Result<()> {
    write_json(path, &queries)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn static_scene() -> SpriteScene {
        let still = |x: f32, y: f32| Trajectory {
            start: [x, y],
            velocity: [0.0, 0.0],
            wobble: [0.0, 0.0],
            wobble_freq: 0.1,
            wobble_phase: 0.0,
            angle: 0.0,
            spin: 0.0,
            bounds: [0.0, 0.0, 128.0, 96.0],
        };
        let tex = Texture {
            color_a: [0.8, 0.2, 0.2],
            color_b: [0.8, 0.2, 0.2],
            stripe_freq: 1.0,
            stripe_angle: 0.0,
            contrast: 0.1,
            spot: [0.0, 0.0],
            drift_period: 50.0,
        };
        SpriteScene {
            seed: 0,
            height: 96,
            width: 128,
            frames: 30,
            background: Background { base: [0.5; 3], gratings: vec![], blobs: vec![], pan: [0.0, 0.0] },
            sprites: vec![
                Sprite { shape: Shape::Disk, radius: 10.0, depth: 1, texture: tex, path: still(60.3, 40.2) },
                Sprite {
                    shape: Shape::Disk,
                    radius: 6.0,
                    depth: 0,
                    texture: tex,
                    path: Trajectory { velocity: [3.1, 0.0], ..still(20.2, 40.2) },
                },
            ],
            points: vec![
                Anchor::Sprite { sprite: 0, local: [0.0, 0.0] },
                Anchor::Sprite { sprite: 0, local: [3.0, -4.0] },
                Anchor::Background { origin: [5.0, 5.0] },
            ],
        }
    }

    #[test]
    fn static_sprite_points_fixed_and_visible() {
        let mut s = static_scene();
        s.sprites.truncate(1);
        let tr = s.tracks();
        for t in 0..s.frames {
            assert!(tr.is_visible(0, t) && tr.is_visible(1, t));
            assert_eq!(tr.position(0, t), [60.3, 40.2]);
        }
    }

    #[test]
    fn crossing_occlusion_matches_geometry() {
        let s = static_scene();
        let tr = s.tracks();
        let (xa0, v, ra) = (20.2f32, 3.1f32, 6.0f32);
        for pt in 0..2 {
            let p = tr.position(pt, 0);
            let (qx, qy) = (p[0].floor() + 0.5, p[1].floor() + 0.5);
            let dy = qy - 40.2;
            let half = (ra * ra - dy * dy).max(0.0).sqrt();
            let (lo, hi) = ((qx - half - xa0) / v, (qx + half - xa0) / v);
            let mut flips = 0;
            for t in 0..s.frames {
                let occluded = (t as f32) > lo && (t as f32) < hi;
                assert_eq!(tr.is_visible(pt, t), !occluded, "point {pt} frame {t}");
                if t > 0 && tr.is_visible(pt, t) != tr.is_visible(pt, t - 1) {
                    flips += 1;
                }
            }
            assert_eq!(flips, 2, "visible → occluded → visible");
        }
    }

    /// Painter's algorithm: paint sprites far to near into an id buffer.
    fn z_buffer(s: &SpriteScene, t: usize) -> Vec<usize> {
        let none = usize::MAX;
        let mut ids = vec![none; s.height * s.width];
        let mut order: Vec<usize> = (0..s.sprites.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(s.sprites[i].depth));
        for i in order {
            let sp = &s.sprites[i];
            for y in 0..s.height {
                for x in 0..s.width {
                    if sp.covers(t as f32, x as f32 + 0.5, y as f32 + 0.5) {
                        ids[y * s.width + x] = i;
                    }
                }
            }
        }
        ids
    }

    #[test]
    fn occlusion_agrees_with_z_buffer() {
        let cfg = SceneConfig::desk();
        for seed in 0..3 {
            let s = SpriteScene::generate(seed, &cfg).unwrap();
            for t in (0..s.frames).step_by(7) {
                let ids = z_buffer(&s, t);
                for p in 0..s.points.len() {
                    let pos = s.point_position(p, t);
                    let inside = pos[0] >= 0.0 && pos[0] < 128.0 && pos[1] >= 0.0 && pos[1] < 96.0;
                    let expect = inside && {
                        let id = ids[pos[1].floor() as usize * 128 + pos[0].floor() as usize];
                        match s.points[p] {
                            Anchor::Sprite { sprite, .. } => id == sprite,
                            Anchor::Background { .. } => id == usize::MAX,
                        }
                    };
                    assert_eq!(s.point_visible(p, t), expect, "seed {seed} frame {t} point {p}");
                }
            }
        }
    }

    #[test]
    fn rigid_motion() {
        let s = SpriteScene::generate(7, &SceneConfig::desk()).unwrap();
        let tr = s.tracks();
        for (p, a) in s.points.iter().enumerate() {
            for t in [0, 13, 77, 119] {
                let got = tr.position(p, t);
                let expect = match *a {
                    Anchor::Sprite { sprite, local } => {
                        let path = &s.sprites[sprite].path;
                        let c = path.center(t as f32);
                        let th = path.rotation(t as f32) as f64;
                        let (u, v) = (local[0] as f64, local[1] as f64);
                        [c[0] as f64 + th.cos() * u - th.sin() * v, c[1] as f64 + th.sin() * u + th.cos() * v]
                    }
                    Anchor::Background { origin } => {
                        let p0 = tr.position(p, 0);
                        assert_eq!(p0, origin);
                        [origin[0] as f64 - s.background.pan[0] as f64 * t as f64, origin[1] as f64 - s.background.pan[1] as f64 * t as f64]
                    }
                };
                assert!((got[0] as f64 - expect[0]).abs() < 1e-4 && (got[1] as f64 - expect[1]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SceneConfig::desk();
        let a = SpriteScene::generate(42, &cfg).unwrap();
        let b = SpriteScene::generate(42, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.render_frame(17).unwrap(), b.render_frame(17).unwrap());
        assert_eq!(a.tracks(), b.tracks());
        assert_ne!(a, SpriteScene::generate(43, &cfg).unwrap());
    }

    #[test]
    fn speeds_within_bound() {
        let cfg = SceneConfig::desk();
        for seed in 0..20 {
            let s = SpriteScene::generate(seed, &cfg).unwrap();
            for sp in &s.sprites {
                for t in 0..119 {
                    let (a, b) = (sp.path.center(t as f32), sp.path.center(t as f32 + 1.0));
                    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                    assert!(d <= cfg.max_speed + 1e-3, "seed {seed} speed {d}");
                }
            }
        }
    }

    #[test]
    fn sample_frames_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = sample_frames(120, 48, SamplingStrategy::Uniform, 1.0, &mut rng).unwrap();
        assert!(idx.windows(2).all(|w| w[1] == w[0] + 1));
        let mut offsets = std::collections::BTreeSet::new();
        for _ in 0..2000 {
            let idx = sample_frames(120, 48, SamplingStrategy::Uniform, 2.0, &mut rng).unwrap();
            assert_eq!(idx.len(), 48);
            assert!(idx.windows(2).all(|w| w[1] == w[0] + 2));
            offsets.insert(idx[0]);
        }
        assert_eq!(offsets.len(), 24);
        assert!(sample_frames(120, 48, SamplingStrategy::Uniform, 2.6, &mut rng).is_err());
        assert_eq!(sample_frames(120, 48, SamplingStrategy::Uniform, 2.5, &mut rng).unwrap()[0], 0);
    }

    #[test]
    fn random_sampling_within_one_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let idx = sample_frames(120, 48, SamplingStrategy::Random, 2.0, &mut rng).unwrap();
            assert_eq!(idx.len(), 48);
            assert!(idx.windows(2).all(|w| w[1] > w[0]));
            assert!(idx[47] - idx[0] < 96);
        }
    }

    fn all_visible(n: usize, t: usize) -> GroundTruthTrack {
        GroundTruthTrack::new(t, vec![[1.0, 1.0]; n * t], vec![true; n * t], vec![0; n]).unwrap()
    }

    #[test]
    fn query_split_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let track = all_visible(100, 16);
        let (mut first_mid, mut total) = (0, 0);
        while total < 10_000 {
            for q in sample_queries(&track, 100, &mut rng) {
                total += 1;
                if q.spec.start == 0 || q.spec.start == 8 {
                    first_mid += 1;
                }
            }
        }
        let frac = first_mid as f64 / total as f64;
        assert!((frac - 0.75).abs() < 0.02, "first/middle share {frac}");
    }

    #[test]
    fn queries_fall_back_to_middle_and_never_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, t) = (50, 10);
        let vis: Vec<bool> = (0..n * t).map(|i| i % t != 0).collect();
        let track = GroundTruthTrack::new(t, vec![[2.0, 3.0]; n * t], vis, vec![0; n]).unwrap();
        let qs = sample_queries(&track, 20, &mut rng);
        assert_eq!(qs.len(), 20);
        assert!(qs.iter().all(|q| q.spec.start != 0));
        assert!(qs.iter().all(|q| track.is_visible(q.point, q.spec.start)));
        let few = all_visible(3, 10);
        assert_eq!(sample_queries(&few, 10, &mut rng).len(), 3);
    }

    #[test]
    fn clip_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SceneConfig::desk();
        cfg.frames = 5;
        let s = SpriteScene::generate(9, &cfg).unwrap();
        let (frames, track) = render_scene(&s).unwrap();
        write_clip(dir.path(), 9, &frames, &track).unwrap();
        let r = ClipReader::open(dir.path()).unwrap();
        assert_eq!(r.manifest.seed, 9);
        assert_eq!(r.frames().unwrap(), frames);
        assert_eq!(r.tracks().unwrap(), track);
        let qs = read_queries(&dir.path().join("queries.json")).unwrap();
        for q in qs {
            assert_eq!(track.position(q.id, q.t), [q.x, q.y]);
        }
    }

    #[test]
    fn training_clip_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = make_training_clip(5, &SceneConfig::desk(), 16, SamplingStrategy::Uniform, 1.0, 32, &mut rng).unwrap();
        assert_eq!(c.frames.len(), 16);
        assert_eq!(c.track.frames, 16);
        assert_eq!(c.track.queries, c.queries.len());
        assert!(c.queries.len() <= 32 && !c.queries.is_empty());
        for (i, q) in c.queries.iter().enumerate() {
            assert!(c.track.is_visible(i, q.start));
            assert_eq!(c.track.position(i, q.start), [q.x, q.y]);
        }
    }

    proptest! {
        #[test]
        fn reflect_stays_in_bounds(x in -1000f32..1000.0) {
            let r = reflect(x, 3.0, 50.0);
            prop_assert!((3.0..=50.0).contains(&r));
        }
    }
}
