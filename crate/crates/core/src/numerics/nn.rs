//! Parameterized building blocks on top of the graph primitives.

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = ps.add_uniform(format!("{name}.weight"), [in_dim, out_dim], in_dim, rng)?;
        let bias = ps.add_uniform(format!("{name}.bias"), [out_dim], in_dim, rng)?;
        Ok(Linear { weight, bias: Some(bias), in_dim, out_dim })
    }

    /// Weight and bias start at zero.
    pub fn zeros(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = ps.add(format!("{name}.weight"), Tensor::zeros([in_dim, out_dim]))?;
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros([out_dim]))?;
        Ok(Linear { weight, bias: Some(bias), in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.affine(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::filled([dim], 1.0))?;
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros([dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(ps, self.gamma), g.param(ps, self.beta));
        g.layer_norm(x, gamma, beta)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(ps, &format!("{name}.fc1"), in_dim, hidden, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, out_dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, ps, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, ps, h)
    }
}

/// Pre-norm residual feed-forward: `x + mlp(norm(x))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(FeedForward {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, ps, x)?;
        let h = self.mlp.forward(g, ps, h)?;
        g.add(x, h)
    }
}

/// Projections around [`Graph::attention`].
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, rng)?,
            heads,
        })
    }

    /// Returns the projected output and per-group fallback flags.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        query: Var,
        key: Var,
        value: Var,
        keep: Option<&[bool]>,
    ) -> Result<(Var, Vec<bool>)> {
        let q = self.q.forward(g, ps, query)?;
        let k = self.k.forward(g, ps, key)?;
        let v = self.v.forward(g, ps, value)?;
        let (a, fallback) = g.attention(q, k, v, keep, self.heads)?;
        let out = self.o.forward(g, ps, a)?;
        Ok((out, fallback))
    }
}
