//! Low-rank adapted linear layer.
//!
//! `h = W x + s * B (A x)` with `W` frozen `[m x n]`, `A` `[r x n]`,
//! `B` `[m x r]` and scaling `s = alpha / r`. `B` starts at zero, so a
//! freshly initialized layer reproduces the base layer exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Distribution used for the down-projection `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInit {
    /// `U(-sqrt(6/n), sqrt(6/n))`, fan-in `n`.
    #[default]
    KaimingUniform,
    /// `N(0, 2/n)`.
    KaimingNormal,
}

impl AdapterInit {
    pub fn sample(self, stream: &mut RngStream, rows: usize, fan_in: usize) -> Tensor {
        let count = rows * fan_in;
        let data = match self {
            AdapterInit::KaimingUniform => {
                let bound = (6.0 / fan_in as f64).sqrt();
                stream.uniform_in(count, -bound, bound)
            }
            AdapterInit::KaimingNormal => {
                let std = (2.0 / fan_in as f64).sqrt();
                stream.normals(count).into_iter().map(|z| z * std).collect()
            }
        };
        Tensor::new(vec![rows, fan_in], data).expect("shape matches count")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub weight: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
    pub rank: usize,
}

impl LoraLayer {
    /// Builds an adapter over `weight` (or a fresh Kaiming-uniform base if `None`).
    pub fn init(
        m: usize,
        n: usize,
        rank: usize,
        alpha: f64,
        stream: &mut RngStream,
        weight: Option<Tensor>,
        init: AdapterInit,
    ) -> Result<Self> {
        if rank == 0 || rank > m.min(n) {
            return Err(Error::Contract(format!("rank {rank} must lie in 1..={} for a [{m}x{n}] layer", m.min(n))));
        }
        if !(alpha > 0.0) {
            return Err(Error::Contract(format!("alpha must be positive, got {alpha}")));
        }
        let weight = match weight {
            Some(w) => {
                if w.shape() != [m, n] {
                    return Err(Error::Dimension(format!("base weight has shape {:?}, expected [{m}, {n}]", w.shape())));
                }
                w.with_grad(false)
            }
            None => AdapterInit::KaimingUniform.sample(stream, m, n),
        };
        let a = init.sample(stream, rank, n).with_grad(true);
        let b = Tensor::zeros(&[m, rank]).with_grad(true);
        Ok(Self { weight, a, b, alpha, rank })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `W x + s * B (A x)` for a single input vector.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.in_features();
        if x.len() != n {
            return Err(Error::Dimension(format!("input has {} values, layer expects {n}", x.len())));
        }
        let col = x.reshape(vec![n, 1])?;
        let base = self.weight.matmul(&col)?;
        let low = self.b.matmul(&self.a.matmul(&col)?)?;
        let h = base.add(&low.scale(self.scaling()))?;
        h.reshape(vec![self.out_features()])
    }

    /// `W + s * B A`; the layer itself is untouched.
    pub fn merge_weights(&self) -> Tensor {
        merged(&self.weight, &self.a, &self.b, self.scaling())
    }
}

/// `W + s * B A`.
pub fn merged(weight: &Tensor, a: &Tensor, b: &Tensor, scaling: f64) -> Tensor {
    let delta = b.matmul(a).expect("adapter shapes are consistent");
    weight.add(&delta.scale(scaling)).expect("delta matches weight shape")
}
