//! Layers assembled from graph ops: linear maps, affine layer norm,
//! multi-head attention and a SiLU feed-forward.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rope::Rope;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    Normal,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, init: Init, rng: &mut R) -> Self {
        let weight = match init {
            Init::Normal => Tensor::randn(&[in_dim, out_dim], 1.0 / (in_dim as f64).sqrt(), rng),
            Init::Zero => Tensor::zeros(&[in_dim, out_dim]),
        };
        Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        g.add(y, p[self.bias])
    }
}

/// Layer norm over the last axis followed by a learned scale and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            scale: store.add(format!("{name}.scale"), Tensor::ones(&[dim])),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.layer_norm(x, LN_EPS)?;
        let y = g.mul(y, p[self.scale])?;
        g.add(y, p[self.shift])
    }
}

/// Rotary positions for the query and key sides of one attention call.
#[derive(Clone, Copy, Debug)]
pub struct RopePositions<'a> {
    pub rope: &'a Rope,
    pub query: &'a [usize],
    pub key: &'a [usize],
}

/// Scaled dot-product multi-head attention; queries come from the first
/// argument of [`Attention::forward`], keys and values from the second.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    /// Output projection is zero-initialised so a residual attention block
    /// starts as the identity.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Contract(format!("{heads} heads do not divide model width {dim}")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, Init::Normal, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, Init::Normal, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, Init::Normal, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, Init::Zero, rng),
            heads,
            dim,
        })
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, n) = (s[0], s[1]);
        let x = g.reshape(x, &[b, n, self.heads, self.dim / self.heads])?;
        g.transpose(x, &[0, 2, 1, 3])
    }

    /// `query`: `[B, Nq, D]`, `context`: `[B, Nk, D]`, optional additive `mask`
    /// broadcastable to `[B, H, Nq, Nk]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        query: Var,
        context: Var,
        rope: Option<RopePositions<'_>>,
        mask: Option<Var>,
    ) -> Result<Var> {
        let qs = g.shape(query).to_vec();
        let ks = g.shape(context).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.dim || ks[2] != self.dim {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: qs,
                rhs: ks,
            });
        }
        let (b, nq) = (qs[0], qs[1]);
        let mut q = self.query.forward(g, p, query)?;
        let mut k = self.key.forward(g, p, context)?;
        let v = self.value.forward(g, p, context)?;
        if let Some(r) = rope {
            q = r.rope.apply(g, q, r.query)?;
            k = r.rope.apply(g, k, r.key)?;
        }
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let kt = g.transpose_last(k)?;
        let scores = g.matmul(q, kt)?;
        let mut scores = g.scale(scores, 1.0 / ((self.dim / self.heads) as f64).sqrt())?;
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let weights = g.softmax(scores)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.transpose(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, nq, self.dim])?;
        self.output.forward(g, p, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, Init::Normal, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, Init::Normal, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.silu(h)?;
        self.down.forward(g, p, h)
    }
}

/// Sinusoidal embedding of a scalar time in `[0, 1]`, one row per batch entry.
pub fn timestep_embedding(times: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[times.len(), dim], |i| {
        let (row, col) = (i / dim, i % dim);
        let k = col % half.max(1);
        let freq = (-(10_000f64).ln() * k as f64 / half.max(1) as f64).exp();
        let arg = 100.0 * times[row] * freq;
        if col < half {
            arg.sin()
        } else if col < 2 * half {
            arg.cos()
        } else {
            0.0
        }
    })
}
