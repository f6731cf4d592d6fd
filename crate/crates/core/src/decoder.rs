//! Query decoder: feature cross-attention, query self-attention and
//! per-query memory attention, each followed by a feed-forward block.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::numerics::nn::{FeedForward, LayerNorm, MultiHeadAttention};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// 2-D sine-cosine encoding for an `h × w` grid, `[h·w, dim]`. The first
/// half of the channels encodes the row, the second half the column.
pub fn sincos_2d(h: usize, w: usize, dim: usize) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(shape_err!("positional encoding needs dim divisible by 4, got {}", dim));
    }
    let quarter = dim / 4;
    let freqs: Vec<f32> = (0..quarter).map(|i| 10000f32.powf(-(i as f32) / quarter as f32)).collect();
    let mut out = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            for pos in [y as f32, x as f32] {
                out.extend(freqs.iter().map(|f| (pos * f).sin()));
                out.extend(freqs.iter().map(|f| (pos * f).cos()));
            }
        }
    }
    Tensor::new([h * w, dim], out)
}

/// Memory keys for one decode call.
#[derive(Clone, Copy, Debug)]
pub struct MemoryInput<'a> {
    /// `[N, L, D]`, entries plus temporal embeddings.
    pub keys: Var,
    /// `N × L`, `true` where an entry is present.
    pub mask: &'a [bool],
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    feat_norm: LayerNorm,
    feat_attn: MultiHeadAttention,
    feat_ff: FeedForward,
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    self_ff: FeedForward,
    mem_norm: LayerNorm,
    mem_attn: MultiHeadAttention,
    mem_ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = 4 * dim;
        Ok(DecoderBlock {
            feat_norm: LayerNorm::new(ps, &format!("{name}.feat_norm"), dim)?,
            feat_attn: MultiHeadAttention::new(ps, &format!("{name}.feat_attn"), dim, heads, rng)?,
            feat_ff: FeedForward::new(ps, &format!("{name}.feat_ff"), dim, hidden, rng)?,
            self_norm: LayerNorm::new(ps, &format!("{name}.self_norm"), dim)?,
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), dim, heads, rng)?,
            self_ff: FeedForward::new(ps, &format!("{name}.self_ff"), dim, hidden, rng)?,
            mem_norm: LayerNorm::new(ps, &format!("{name}.mem_norm"), dim)?,
            mem_attn: MultiHeadAttention::new(ps, &format!("{name}.mem_attn"), dim, heads, rng)?,
            mem_ff: FeedForward::new(ps, &format!("{name}.mem_ff"), dim, hidden, rng)?,
        })
    }

    pub fn feature_stage(&self, g: &mut Graph, ps: &ParamStore, x: Var, tokens: Var) -> Result<Var> {
        let n = self.feat_norm.forward(g, ps, x)?;
        let (a, _) = self.feat_attn.forward(g, ps, n, tokens, tokens, None)?;
        let x = g.add(x, a)?;
        self.feat_ff.forward(g, ps, x)
    }

    pub fn self_stage(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let n = self.self_norm.forward(g, ps, x)?;
        let (a, _) = self.self_attn.forward(g, ps, n, n, n, None)?;
        let x = g.add(x, a)?;
        self.self_ff.forward(g, ps, x)
    }

    /// Query `i` attends to row `i` of the memory only. Queries without any
    /// unmasked key receive a zero residual.
    pub fn memory_stage(&self, g: &mut Graph, ps: &ParamStore, x: Var, memory: Option<(Var, &[bool])>) -> Result<Var> {
        let x = match memory {
            Some((keys, keep)) => {
                let shape = g.shape(x).to_vec();
                let (nq, d) = (shape[0], shape[1]);
                if g.shape(keys).first() != Some(&nq) {
                    return Err(shape_err!("memory keys {:?} for {} queries", g.shape(keys), nq));
                }
                let n = self.mem_norm.forward(g, ps, x)?;
                let q = g.reshape(n, [nq, 1, d])?;
                let (a, fallback) = self.mem_attn.forward(g, ps, q, keys, keys, Some(keep))?;
                let a = g.reshape(a, [nq, d])?;
                if fallback.iter().all(|&f| f) {
                    x
                } else if fallback.iter().any(|&f| f) {
                    let gate = Tensor::from_fn([nq, d], |i| if fallback[i / d] { 0.0 } else { 1.0 });
                    let gate = g.constant(gate)?;
                    let a = g.mul(a, gate)?;
                    g.add(x, a)?
                } else {
                    g.add(x, a)?
                }
            }
            None => x,
        };
        self.mem_ff.forward(g, ps, x)
    }
}

#[derive(Clone, Debug)]
pub struct QueryDecoder {
    pub dim: usize,
    token_norm: LayerNorm,
    pub blocks: Vec<DecoderBlock>,
}

impl QueryDecoder {
    pub fn new(ps: &mut ParamStore, dim: usize, heads: usize, blocks: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(QueryDecoder {
            dim,
            token_norm: LayerNorm::new(ps, "decoder.token_norm", dim)?,
            blocks: (0..blocks)
                .map(|b| DecoderBlock::new(ps, &format!("decoder.block{b}"), dim, heads, rng))
                .collect::<Result<_>>()?,
        })
    }

    /// `fused[H/S, W/S, D]` plus `pos[P, D]` becomes the frame token set.
    pub fn tokens(&self, g: &mut Graph, ps: &ParamStore, fused: Var, pos: Var) -> Result<Var> {
        let s = g.shape(fused).to_vec();
        let flat = g.reshape(fused, [s[0] * s[1], s[2]])?;
        let n = self.token_norm.forward(g, ps, flat)?;
        g.add(n, pos)
    }

    /// Runs every block on `q_init[N, D]`. With `key_drop > 0` each present
    /// memory key is dropped independently with that probability.
    pub fn decode(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        q_init: Var,
        tokens: Var,
        memory: Option<MemoryInput<'_>>,
        key_drop: f32,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let keep: Option<Vec<bool>> = memory.map(|m| {
            if key_drop > 0.0 {
                m.mask.iter().map(|&k| k && rng.random::<f32>() >= key_drop).collect()
            } else {
                m.mask.to_vec()
            }
        });
        let mem = memory.zip(keep.as_deref()).map(|(m, k)| (m.keys, k));
        let mut x = q_init;
        for block in &self.blocks {
            x = block.feature_stage(g, ps, x, tokens)?;
            x = block.self_stage(g, ps, x)?;
            x = block.memory_stage(g, ps, x, mem)?;
        }
        Ok(x)
    }
}
