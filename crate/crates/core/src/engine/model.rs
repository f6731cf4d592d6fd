//! The tracker network and its per-frame forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use crate::decoder::{sincos_2d, MemoryInput, QueryDecoder};
use crate::encoder::{level_extent, Encoder, Pyramid, LEVELS};
use crate::error::Result;
use crate::heads::{classify, coarse_position, OffsetHead, RerankOutput, Reranker, ScaleMix, SimilarityMap, StatusHead, TrackPrediction};
use crate::loss::HeadOutputs;
use crate::memory::{add_temporal, TemporalEmbedding};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct TrackerModel {
    pub config: Config,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: QueryDecoder,
    pub gamma: TemporalEmbedding,
    pub mix: ScaleMix,
    pub reranker: Reranker,
    pub offset: OffsetHead,
    pub status: StatusHead,
    pos: Tensor,
}

/// Per-frame inputs, restricted to the active queries.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'a> {
    pub pyramid: Pyramid,
    /// `[n, D]`.
    pub q_init: Var,
    /// Right-aligned memory rows `[n·L, D]` with their key mask.
    pub memory: Option<(Var, &'a [bool])>,
    /// `[L, D]`.
    pub gamma: Var,
}

#[derive(Clone, Debug)]
pub struct FrameForward {
    pub q_dec: Var,
    pub c_dec: SimilarityMap,
    pub rerank: RerankOutput,
    /// Selected patch and its center, per query.
    pub coarse: Vec<(usize, (f32, f32))>,
    pub offsets: Vec<Var>,
    pub status: Var,
}

impl FrameForward {
    pub fn head_outputs(&self) -> HeadOutputs {
        HeadOutputs {
            refined_logits: self.rerank.similarity.logits,
            decoder_logits: self.c_dec.logits,
            offsets: self.offsets.clone(),
            status: self.status,
            topk_uncertainty: self.rerank.topk.uncertainty_logits,
            topk_score_logits: self.rerank.topk.score_logits,
        }
    }

    /// The refined query, which is what memory stores.
    pub fn query(&self) -> Var {
        self.rerank.query
    }

    pub fn predictions(&self, g: &Graph) -> Vec<TrackPrediction> {
        let last = *self.offsets.last().expect("offset head has layers");
        let off = g.value(last);
        let st = g.value(self.status);
        let sig = |z: f32| 1.0 / (1.0 + (-z).exp());
        self.coarse
            .iter()
            .enumerate()
            .map(|(i, &(patch, c))| {
                let o = off.row(i);
                TrackPrediction {
                    patch,
                    patch_center: c,
                    offset: (o[0], o[1]),
                    position: (c.0 + o[0], c.1 + o[1]),
                    visibility: sig(st.row(i)[0]),
                    uncertainty: sig(st.row(i)[1]),
                }
            })
            .collect()
    }
}

impl TrackerModel {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamStore::new();
        let d = config.dim;
        let encoder = Encoder::new(&mut ps, d, &mut rng)?;
        let decoder = QueryDecoder::new(&mut ps, d, config.heads, config.decoder_blocks, &mut rng)?;
        let gamma = TemporalEmbedding::new(&mut ps, config.memory_len, d, &mut rng)?;
        let mix = ScaleMix::new(&mut ps, LEVELS)?;
        let reranker = Reranker::new(&mut ps, d, config.heads, config.topk, config.deform_points, LEVELS, &mut rng)?;
        let offset = OffsetHead::new(&mut ps, d, config.deform_points, LEVELS, &mut rng)?;
        let status = StatusHead::new(&mut ps, d, &mut rng)?;
        Self::assemble(config.clone(), ps, encoder, decoder, gamma, mix, reranker, offset, status)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: Config,
        params: ParamStore,
        encoder: Encoder,
        decoder: QueryDecoder,
        gamma: TemporalEmbedding,
        mix: ScaleMix,
        reranker: Reranker,
        offset: OffsetHead,
        status: StatusHead,
    ) -> Result<Self> {
        let (h, w) = level_extent(config.frame_h, config.frame_w, 0);
        let pos = sincos_2d(h, w, config.dim)?;
        Ok(TrackerModel { config, params, encoder, decoder, gamma, mix, reranker, offset, status, pos })
    }

    /// Decoder through offset and status heads for the active queries.
    pub fn forward_frame(&self, g: &mut Graph, input: FrameInput<'_>, key_drop: f32, rng: &mut impl Rng) -> Result<FrameForward> {
        let ps = &self.params;
        let cfg = &self.config;
        let pyr = input.pyramid;
        let pos = g.constant(self.pos.clone())?;
        let tokens = self.decoder.tokens(g, ps, pyr.fused, pos)?;
        let memory = match input.memory {
            Some((raw, mask)) if cfg.use_memory => Some(MemoryInput { keys: add_temporal(g, raw, input.gamma)?, mask }),
            _ => None,
        };
        let q_dec = self.decoder.decode(g, ps, input.q_init, tokens, memory, key_drop, rng)?;
        let c_dec = classify(g, ps, &self.mix, q_dec, &pyr.levels, cfg.tau)?;
        let rerank = self.reranker.forward(g, ps, &self.mix, q_dec, &pyr.levels, &c_dec, cfg.tau)?;
        let gw = g.shape(pyr.levels[0])[1];
        let coarse = coarse_position(g.value(rerank.similarity.probs), gw);
        let centers: Vec<(f32, f32)> = coarse.iter().map(|c| c.1).collect();
        let maps = [pyr.fused, pyr.levels[1], pyr.levels[2], pyr.levels[3]];
        let offsets = self.offset.forward(g, ps, rerank.query, &maps, &centers)?;
        let status = self.status.forward(g, ps, rerank.query)?;
        Ok(FrameForward { q_dec, c_dec, rerank, coarse, offsets, status })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_floats()
    }
}
