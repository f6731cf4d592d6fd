//! Point prediction: multi-scale patch classification, top-k re-ranking,
//! deformable offset refinement, visibility and uncertainty.

use std::f32::consts::TAU;

use rand::Rng;

use crate::encoder::STRIDE;
use crate::error::{shape_err, Error, Result};
use crate::numerics::nn::{FeedForward, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Number of offset refinement layers.
pub const OFFSET_LAYERS: usize = 3;

/// Learned softmax weights over pyramid levels.
#[derive(Clone, Debug)]
pub struct ScaleMix {
    pub logits: ParamId,
}

impl ScaleMix {
    pub fn new(ps: &mut ParamStore, levels: usize) -> Result<Self> {
        Ok(ScaleMix { logits: ps.add("heads.scale_mix", Tensor::zeros([levels]))? })
    }

    pub fn weights(&self, ps: &ParamStore) -> Vec<f32> {
        let l = ps.tensor(self.logits).data();
        let max = l.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f32> = l.iter().map(|v| (v - max).exp()).collect();
        let s: f32 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

/// A distribution over level-0 patches for every query.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityMap {
    /// `[N, P]`, mixed cosine similarity divided by the temperature.
    pub logits: Var,
    /// `[N, P]`, rows sum to one.
    pub probs: Var,
}

/// Cosine similarity of every query against every patch of each level,
/// upsampled to the level-0 grid and mixed, then a spatial softmax at `tau`.
/// `levels[l]` is `[h0 / 2^l, w0 / 2^l, D]`.
pub fn classify(g: &mut Graph, ps: &ParamStore, mix: &ScaleMix, q: Var, levels: &[Var], tau: f32) -> Result<SimilarityMap> {
    if !(tau > 0.0) {
        return Err(Error::Param(format!("temperature must be positive, got {tau}")));
    }
    if ps.tensor(mix.logits).len() != levels.len() {
        return Err(shape_err!("{} mixing weights for {} levels", ps.tensor(mix.logits).len(), levels.len()));
    }
    let n = g.shape(q)[0];
    let qn = g.normalize_rows(q)?;
    let s0 = g.shape(levels[0]).to_vec();
    let p = s0[0] * s0[1];
    let logits = g.param(ps, mix.logits);
    let w = g.softmax(logits, 1.0)?;
    let mut mixed = None;
    for (l, &f) in levels.iter().enumerate() {
        let s = g.shape(f).to_vec();
        if s[0] << l != s0[0] || s[1] << l != s0[1] {
            return Err(shape_err!("level {} extent {:?} does not halve level 0 {:?}", l, s, s0));
        }
        let flat = g.reshape(f, [s[0] * s[1], s[2]])?;
        let fnorm = g.normalize_rows(flat)?;
        let sim = g.matmul_ex(fnorm, qn, true)?;
        let sim = g.reshape(sim, [s[0], s[1], n])?;
        let sim = if l > 0 { g.upsample_nearest(sim, 1 << l)? } else { sim };
        let sim = g.reshape(sim, [p, n])?;
        let wl = g.slice_last(w, l, 1)?;
        let term = g.scale_by(sim, wl)?;
        mixed = Some(match mixed {
            Some(m) => g.add(m, term)?,
            None => term,
        });
    }
    let mixed = mixed.ok_or_else(|| shape_err!("classify needs at least one level"))?;
    let mixed = g.transpose(mixed)?;
    let logits = g.scale(mixed, 1.0 / tau)?;
    let probs = g.softmax(logits, 1.0)?;
    Ok(SimilarityMap { logits, probs })
}

/// Indices of the `k` largest entries, descending; ties go to the smaller index.
pub fn top_k(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// First index of the maximum.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Frame-pixel center of level-0 patch `index` on a grid `grid_w` wide.
pub fn patch_center(index: usize, grid_w: usize) -> (f32, f32) {
    let (r, c) = (index / grid_w, index % grid_w);
    ((c as f32 + 0.5) * STRIDE as f32, (r as f32 + 0.5) * STRIDE as f32)
}

/// Argmax patch and its center for every row of `probs[N, P]`.
pub fn coarse_position(probs: &Tensor, grid_w: usize) -> Vec<(usize, (f32, f32))> {
    (0..probs.rows())
        .map(|i| {
            let a = argmax(probs.row(i));
            (a, patch_center(a, grid_w))
        })
        .collect()
}

/// Multi-level deformable cross-attention followed by a feed-forward block.
/// Each query predicts `points` offsets and weights per level around its
/// reference point; samples are mixed by a softmax over all levels and points.
#[derive(Clone, Debug)]
pub struct DeformableLayer {
    norm: LayerNorm,
    offsets: Linear,
    weights: Linear,
    value: Linear,
    ff: FeedForward,
    levels: usize,
    points: usize,
}

impl DeformableLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, levels: usize, points: usize, rng: &mut impl Rng) -> Result<Self> {
        let offsets = Linear::zeros(ps, &format!("{name}.offsets"), dim, levels * points * 2)?;
        let ring: Vec<f32> = (0..levels)
            .flat_map(|_| {
                (0..points).flat_map(move |j| {
                    let a = TAU * j as f32 / points as f32;
                    [a.cos(), a.sin()]
                })
            })
            .collect();
        ps.set(offsets.bias.expect("linear has bias"), Tensor::new([levels * points * 2], ring)?)?;
        Ok(DeformableLayer {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), dim)?,
            offsets,
            weights: Linear::zeros(ps, &format!("{name}.weights"), dim, levels * points)?,
            value: Linear::new(ps, &format!("{name}.value"), dim, dim, rng)?,
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, 2 * dim, rng)?,
            levels,
            points,
        })
    }

    /// `x[M, D]` with reference points in frame pixels; `maps[l]` has stride
    /// `S·2^l`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, refs: &[(f32, f32)], maps: &[Var]) -> Result<Var> {
        let (m, d) = (g.shape(x)[0], g.shape(x)[1]);
        if refs.len() != m || maps.len() != self.levels {
            return Err(shape_err!("deformable: {} refs, {} maps for {} queries, {} levels", refs.len(), maps.len(), m, self.levels));
        }
        let k = self.points;
        let n = self.norm.forward(g, ps, x)?;
        let off = self.offsets.forward(g, ps, n)?;
        let logits = self.weights.forward(g, ps, n)?;
        let attn = g.softmax(logits, 1.0)?;
        let mut per_level = Vec::with_capacity(self.levels);
        for (l, &map) in maps.iter().enumerate() {
            let stride = (STRIDE << l) as f32;
            let base: Vec<f32> = refs
                .iter()
                .flat_map(|&(px, py)| (0..k).flat_map(move |_| [px / stride - 0.5, py / stride - 0.5]))
                .collect();
            let base = g.constant(Tensor::new([m * k, 2], base)?)?;
            let o = g.slice_last(off, l * k * 2, k * 2)?;
            let o = g.reshape(o, [m * k, 2])?;
            let pts = g.add(base, o)?;
            let s = g.bilinear_sample(map, pts)?;
            per_level.push(g.reshape(s, [m, k * d])?);
        }
        let samples = g.concat_last(&per_level)?;
        let samples = g.reshape(samples, [m, self.levels * k, d])?;
        let mixed = g.weighted_sum(attn, samples)?;
        let v = self.value.forward(g, ps, mixed)?;
        let x = g.add(x, v)?;
        self.ff.forward(g, ps, x)
    }
}

/// Top-k candidates for every query.
#[derive(Clone, Debug)]
pub struct TopKSet {
    pub k: usize,
    /// `N·k` patch indices, per query in descending similarity.
    pub indices: Vec<usize>,
    /// `N·k` similarity values from the decoder map.
    pub scores: Vec<f32>,
    /// `[N·k, D]` candidate features.
    pub features: Var,
    /// `[N, k]` uncertainty logits per candidate.
    pub uncertainty_logits: Var,
    /// `[N, k]` score logits; `score_probs` is their row softmax.
    pub score_logits: Var,
    pub score_probs: Var,
}

#[derive(Clone, Debug)]
pub struct RerankOutput {
    pub query: Var,
    pub topk: TopKSet,
    pub similarity: SimilarityMap,
}

#[derive(Clone, Debug)]
pub struct Reranker {
    k: usize,
    sample: DeformableLayer,
    fuse_norm: LayerNorm,
    fuse: MultiHeadAttention,
    fuse_ff: FeedForward,
    score: Mlp,
}

impl Reranker {
    pub fn new(ps: &mut ParamStore, dim: usize, heads: usize, k: usize, points: usize, levels: usize, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 {
            return Err(Error::Param("top-k must be at least 1".into()));
        }
        Ok(Reranker {
            k,
            sample: DeformableLayer::new(ps, "rerank.sample", dim, levels, points, rng)?,
            fuse_norm: LayerNorm::new(ps, "rerank.fuse_norm", dim)?,
            fuse: MultiHeadAttention::new(ps, "rerank.fuse", dim, heads, rng)?,
            fuse_ff: FeedForward::new(ps, "rerank.fuse_ff", dim, 4 * dim, rng)?,
            score: Mlp::new(ps, "rerank.score", 2 * dim, dim, 2, rng)?,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Selects the top-k patches of `c_dec`, samples features around each,
    /// fuses them into the query and reclassifies.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        mix: &ScaleMix,
        q_dec: Var,
        levels: &[Var],
        c_dec: &SimilarityMap,
        tau: f32,
    ) -> Result<RerankOutput> {
        let (n, d) = (g.shape(q_dec)[0], g.shape(q_dec)[1]);
        let s0 = g.shape(levels[0]).to_vec();
        let (gw, p) = (s0[1], s0[0] * s0[1]);
        let k = self.k;
        if k > p {
            return Err(Error::Param(format!("top-k {k} exceeds {p} patches")));
        }
        let probs = g.value(c_dec.probs).clone();
        let mut indices = Vec::with_capacity(n * k);
        let mut scores = Vec::with_capacity(n * k);
        for i in 0..n {
            let row = probs.row(i);
            for j in top_k(row, k) {
                indices.push(j);
                scores.push(row[j]);
            }
        }
        let f0 = g.reshape(levels[0], [p, d])?;
        let gathered = g.gather_rows(f0, indices.clone())?;
        let owners: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let q_rep = g.gather_rows(q_dec, owners)?;
        let cand = g.add(q_rep, gathered)?;
        let refs: Vec<(f32, f32)> = indices.iter().map(|&j| patch_center(j, gw)).collect();
        let features = self.sample.forward(g, ps, cand, &refs, levels)?;

        let qn = self.fuse_norm.forward(g, ps, q_dec)?;
        let qn = g.reshape(qn, [n, 1, d])?;
        let kv = g.reshape(features, [n, k, d])?;
        let (a, _) = self.fuse.forward(g, ps, qn, kv, kv, None)?;
        let a = g.reshape(a, [n, d])?;
        let q = g.add(q_dec, a)?;
        let query = self.fuse_ff.forward(g, ps, q)?;

        let pair = g.concat_last(&[q_rep, features])?;
        let out = self.score.forward(g, ps, pair)?;
        let u = g.slice_last(out, 0, 1)?;
        let uncertainty_logits = g.reshape(u, [n, k])?;
        let s = g.slice_last(out, 1, 1)?;
        let score_logits = g.reshape(s, [n, k])?;
        let score_probs = g.softmax(score_logits, 1.0)?;
        let similarity = classify(g, ps, mix, query, levels, tau)?;
        Ok(RerankOutput {
            query,
            topk: TopKSet { k, indices, scores, features, uncertainty_logits, score_logits, score_probs },
            similarity,
        })
    }
}

/// Deformable layers around the coarse prediction with a shared tanh head.
#[derive(Clone, Debug)]
pub struct OffsetHead {
    pub layers: Vec<DeformableLayer>,
    norm: LayerNorm,
    pub head: Linear,
}

impl OffsetHead {
    pub fn new(ps: &mut ParamStore, dim: usize, points: usize, levels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(OffsetHead {
            layers: (0..OFFSET_LAYERS)
                .map(|l| DeformableLayer::new(ps, &format!("offset.layer{l}"), dim, levels, points, rng))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(ps, "offset.norm", dim)?,
            head: Linear::zeros(ps, "offset.head", dim, 2)?,
        })
    }

    /// Offsets in frame pixels after every layer, each `[N, 2]` within `±S`.
    /// `maps` are the fused level-0 map followed by the coarser pyramid levels.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, q: Var, maps: &[Var], centers: &[(f32, f32)]) -> Result<Vec<Var>> {
        let mut x = q;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(g, ps, x, centers, maps)?;
            let n = self.norm.forward(g, ps, x)?;
            let o = self.head.forward(g, ps, n)?;
            let o = g.tanh(o)?;
            out.push(g.scale(o, STRIDE as f32)?);
        }
        Ok(out)
    }
}

/// Visibility and uncertainty logits, `[N, 2]`.
#[derive(Clone, Debug)]
pub struct StatusHead {
    mlp: Mlp,
}

impl StatusHead {
    pub fn new(ps: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(StatusHead { mlp: Mlp::new(ps, "status", dim, dim, 2, rng)? })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, q: Var) -> Result<Var> {
        self.mlp.forward(g, ps, q)
    }
}

/// Final output for one query on one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackPrediction {
    pub patch: usize,
    pub patch_center: (f32, f32),
    pub offset: (f32, f32),
    pub position: (f32, f32),
    pub visibility: f32,
    pub uncertainty: f32,
}

impl TrackPrediction {
    pub fn visible(&self, threshold: f32) -> bool {
        self.visibility > threshold
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn classify_peaked_case() {
        let p = 64;
        let mut ps = ParamStore::new();
        let mix = ScaleMix::new(&mut ps, 1).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::eye(p).reshaped([8, 8, p]).unwrap()).unwrap();
        let q = g.constant(Tensor::from_fn([1, p], |i| if i == 19 { 3.0 } else { 0.0 })).unwrap();
        let c = classify(&mut g, &ps, &mix, q, &[f], 0.05).unwrap();
        let probs = g.data(c.probs);
        let e20 = 20f64.exp();
        let expect = e20 / (e20 + (p - 1) as f64);
        assert_eq!(argmax(probs), 19);
        assert!((probs[19] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn classify_equal_similarity_is_uniform() {
        let mut ps = ParamStore::new();
        let mix = ScaleMix::new(&mut ps, 2).unwrap();
        let mut g = Graph::new();
        let f0 = g.constant(Tensor::filled([4, 4, 3], 1.0)).unwrap();
        let f1 = g.constant(Tensor::filled([2, 2, 3], 1.0)).unwrap();
        let q = g.constant(Tensor::filled([2, 3], 0.7)).unwrap();
        let c = classify(&mut g, &ps, &mix, q, &[f0, f1], 0.05).unwrap();
        for v in g.data(c.probs) {
            assert!((v - 1.0 / 16.0).abs() < 1e-6);
        }
        let zero = g.constant(Tensor::zeros([1, 3])).unwrap();
        assert!(matches!(classify(&mut g, &ps, &mix, zero, &[f0, f1], 0.05), Err(Error::Numeric(_))));
    }

    #[test]
    fn classify_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::new();
        let mix = ScaleMix::new(&mut ps, 4).unwrap();
        ps.set(mix.logits, Tensor::normal([4], 1.0, &mut rng)).unwrap();
        let w = mix.weights(&ps);
        assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-6 && w.iter().all(|&v| v >= 0.0));
        let mut g = Graph::new();
        let levels: Vec<Var> = (0..4)
            .map(|l| g.constant(Tensor::normal([16 >> l, 16 >> l, 8], 1.0, &mut rng)).unwrap())
            .collect();
        let q = g.constant(Tensor::normal([5, 8], 1.0, &mut rng)).unwrap();
        let c = classify(&mut g, &ps, &mix, q, &levels, 0.05).unwrap();
        let t = g.value(c.probs);
        assert_eq!(t.shape(), &[5, 256]);
        for i in 0..5 {
            assert!((t.row(i).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn patch_center_and_ties() {
        let mut row = vec![0.0; 8 * 6];
        row[2 * 8 + 3] = 1.0;
        let probs = Tensor::new([1, 48], row).unwrap();
        assert_eq!(coarse_position(&probs, 8), vec![(19, (14.0, 10.0))]);
        let uniform = Tensor::filled([1, 48], 1.0 / 48.0);
        assert_eq!(coarse_position(&uniform, 8)[0].0, 0);
        assert_eq!(top_k(&[0.2, 0.5, 0.2, 0.5], 3), vec![1, 3, 0]);
    }

    proptest! {
        #[test]
        fn top_k_matches_sort_oracle(row in proptest::collection::vec(0u8..20, 1..60), k in 1usize..20) {
            let row: Vec<f32> = row.into_iter().map(f32::from).collect();
            let k = k.min(row.len());
            let mut pairs: Vec<(f32, usize)> = row.iter().copied().zip(0..).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let oracle: Vec<usize> = pairs.iter().take(k).map(|p| p.1).collect();
            prop_assert_eq!(top_k(&row, k), oracle);
        }

        #[test]
        fn argmax_matches_scan(row in proptest::collection::vec(-5i8..5, 1..50)) {
            let row: Vec<f32> = row.into_iter().map(f32::from).collect();
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            prop_assert_eq!(argmax(&row), row.iter().position(|&v| v == max).unwrap());
        }
    }

    fn pyramid(g: &mut Graph, rng: &mut ChaCha8Rng, d: usize) -> Vec<Var> {
        (0..4).map(|l| g.constant(Tensor::normal([8 >> l, 16 >> l, d], 1.0, rng)).unwrap()).collect()
    }

    #[test]
    fn rerank_shapes_and_single_candidate() {
        let d = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for k in [1, 5] {
            let mut ps = ParamStore::new();
            let mix = ScaleMix::new(&mut ps, 4).unwrap();
            let rr = Reranker::new(&mut ps, d, 4, k, 4, 4, &mut rng).unwrap();
            let mut g = Graph::new();
            let levels = pyramid(&mut g, &mut rng, d);
            let q = g.constant(Tensor::normal([3, d], 1.0, &mut rng)).unwrap();
            let c = classify(&mut g, &ps, &mix, q, &levels, 0.05).unwrap();
            let out = rr.forward(&mut g, &ps, &mix, q, &levels, &c, 0.05).unwrap();
            assert_eq!(out.topk.indices.len(), 3 * k);
            assert_eq!(g.shape(out.query), &[3, d]);
            assert_eq!(g.shape(out.topk.score_probs), &[3, k]);
            let probs = g.value(c.probs).clone();
            for i in 0..3 {
                assert_eq!(out.topk.indices[i * k], argmax(probs.row(i)));
                let s: f32 = g.value(out.topk.score_probs).row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
            if k == 1 {
                assert!(g.data(out.topk.score_probs).iter().all(|&v| v == 1.0));
            }
        }
        let mut ps = ParamStore::new();
        let mix = ScaleMix::new(&mut ps, 4).unwrap();
        let rr = Reranker::new(&mut ps, d, 4, 129, 4, 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let levels = pyramid(&mut g, &mut rng, d);
        let q = g.constant(Tensor::normal([1, d], 1.0, &mut rng)).unwrap();
        let c = classify(&mut g, &ps, &mix, q, &levels, 0.05).unwrap();
        assert!(matches!(rr.forward(&mut g, &ps, &mix, q, &levels, &c, 0.05), Err(Error::Param(_))));
    }

    #[test]
    fn offsets_zero_at_init_and_bounded() {
        let d = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamStore::new();
        let head = OffsetHead::new(&mut ps, d, 4, 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let maps = pyramid(&mut g, &mut rng, d);
        let q = g.constant(Tensor::normal([4, d], 1.0, &mut rng)).unwrap();
        let centers = [(2.0, 2.0), (30.0, 14.0), (62.0, 30.0), (0.0, 0.0)];
        let out = head.forward(&mut g, &ps, q, &maps, &centers).unwrap();
        assert_eq!(out.len(), OFFSET_LAYERS);
        assert!(out.iter().all(|&o| g.data(o).iter().all(|&v| v == 0.0)));

        ps.set(head.head.weight, Tensor::normal([d, 2], 50.0, &mut rng)).unwrap();
        let mut g = Graph::new();
        let maps = pyramid(&mut g, &mut rng, d);
        let q = g.constant(Tensor::normal([4, d], 10.0, &mut rng)).unwrap();
        let out = head.forward(&mut g, &ps, q, &maps, &centers).unwrap();
        assert!(out.iter().all(|&o| g.data(o).iter().all(|v| v.abs() <= STRIDE as f32)));
    }

    #[test]
    fn visibility_threshold_rule() {
        let p = TrackPrediction {
            patch: 0,
            patch_center: (2.0, 2.0),
            offset: (0.0, 0.0),
            position: (2.0, 2.0),
            visibility: 0.5,
            uncertainty: 0.5,
        };
        assert!(!p.visible(0.8));
        assert!(TrackPrediction { visibility: 0.81, ..p }.visible(0.8));
    }
}
