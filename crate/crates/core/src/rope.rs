//! Rotary positional embedding.
//!
//! Feature pairs `(2j, 2j+1)` inside each head are rotated by `pos · θ_j` with
//! `θ_j = base^(-2j / head_dim)`. The rotation is expressed with graph ops as
//! `x ⊙ cos + (x · R) ⊙ sin`, where `R` is the constant pair-swap matrix.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Rope {
    head_dim: usize,
    base: f64,
}

impl Rope {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(TensorError::InvalidShape {
                op: "rope",
                shape: vec![head_dim],
                reason: "head width must be even".into(),
            });
        }
        Ok(Self { head_dim, base })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn angle(&self, position: usize, feature: usize) -> f64 {
        let pair = (feature % self.head_dim) / 2;
        position as f64 * self.base.powf(-2.0 * pair as f64 / self.head_dim as f64)
    }

    /// `cos` and signed `sin` tables of shape `[N, D]`.
    pub fn tables(&self, positions: &[usize], dim: usize) -> (Tensor, Tensor) {
        let n = positions.len();
        let cos = Tensor::from_fn(&[n, dim], |i| self.angle(positions[i / dim], i % dim).cos());
        let sin = Tensor::from_fn(&[n, dim], |i| self.angle(positions[i / dim], i % dim).sin());
        (cos, sin)
    }

    /// Constant `[D, D]` matrix mapping `(a, b)` pairs to `(-b, a)`.
    fn swap_matrix(dim: usize) -> Tensor {
        let mut r = Tensor::zeros(&[dim, dim]);
        let data = r.data_mut();
        for j in 0..dim / 2 {
            let (even, odd) = (2 * j, 2 * j + 1);
            data[odd * dim + even] = -1.0;
            data[even * dim + odd] = 1.0;
        }
        r
    }

    /// Rotate `x: [B, N, D]` by the given per-token positions.
    pub fn apply(&self, g: &mut Graph, x: Var, positions: &[usize]) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let dim = *shape.last().unwrap_or(&0);
        if !dim.is_multiple_of(2) || !dim.is_multiple_of(self.head_dim) {
            return Err(TensorError::InvalidShape {
                op: "rope",
                shape,
                reason: format!("feature width must be even and a multiple of {}", self.head_dim),
            });
        }
        if shape.len() < 2 || shape[shape.len() - 2] != positions.len() {
            return Err(TensorError::InvalidShape {
                op: "rope",
                shape,
                reason: format!("expected {} positions along the token axis", positions.len()),
            });
        }
        let (cos, sin) = self.tables(positions, dim);
        let cos = g.constant(cos);
        let sin = g.constant(sin);
        let swap = g.constant(Self::swap_matrix(dim));
        let straight = g.mul(x, cos)?;
        let swapped = g.matmul(x, swap)?;
        let rotated = g.mul(swapped, sin)?;
        g.add(straight, rotated)
    }
}

/// Rotate `x: [B, N, D]` with a single-head rotary table spanning all of `D`.
pub fn rope_apply(g: &mut Graph, x: Var, positions: &[usize]) -> Result<Var> {
    let dim = *g.shape(x).last().unwrap_or(&0);
    if !dim.is_multiple_of(2) {
        return Err(TensorError::InvalidShape {
            op: "rope",
            shape: g.shape(x).to_vec(),
            reason: "feature width must be even".into(),
        });
    }
    Rope::new(dim, 10_000.0)?.apply(g, x, positions)
}
