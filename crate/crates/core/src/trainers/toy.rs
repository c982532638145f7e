//! One-dimensional toy losses.
//!
//! The double well is a sum of two Gaussian wells: a narrow one and a wide
//! one. Its convolution with `N(0, sigma^2)` has a closed form, which the
//! tests use as an oracle for the Monte-Carlo smoothed loss.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::perturb::{sample_perturbation, seed_label, PerturbationRecord};
use crate::rng::RngStream;

/// `-depth * exp(-(w - center)^2 / (2 width^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Well {
    pub depth: f64,
    pub center: f64,
    pub width: f64,
}

impl Well {
    pub fn loss(&self, w: f64) -> f64 {
        let d = w - self.center;
        -self.depth * (-d * d / (2.0 * self.width * self.width)).exp()
    }

    pub fn grad(&self, w: f64) -> f64 {
        let d = w - self.center;
        -self.loss(w) * d / (self.width * self.width)
    }

    /// `E[loss(w + e)]` for `e ~ N(0, sigma^2)`.
    pub fn smoothed(&self, sigma: f64) -> Well {
        let width = (self.width * self.width + sigma * sigma).sqrt();
        Well { depth: self.depth * self.width / width, center: self.center, width }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoubleWell {
    pub narrow: Well,
    pub wide: Well,
}

impl Default for DoubleWell {
    fn default() -> Self {
        Self { narrow: Well { depth: 1.0, center: -1.0, width: 0.05 }, wide: Well { depth: 2.0, center: 0.5, width: 1.0 } }
    }
}

impl DoubleWell {
    pub fn loss(&self, w: f64) -> f64 {
        self.narrow.loss(w) + self.wide.loss(w)
    }

    pub fn grad(&self, w: f64) -> f64 {
        self.narrow.grad(w) + self.wide.grad(w)
    }

    /// Exact Gaussian smoothing.
    pub fn smoothed_loss(&self, w: f64, sigma: f64) -> f64 {
        self.narrow.smoothed(sigma).loss(w) + self.wide.smoothed(sigma).loss(w)
    }

    /// Midpoint between the two basins; a trajectory ending above it sits in the wide basin.
    pub fn divide(&self) -> f64 {
        (self.narrow.center + self.wide.center) / 2.0
    }
}

/// Gradient descent on `E[L(w + e)]` with one draw per step, where `e`
/// follows the filter-norm rule for a single `1 x 1` filter:
/// `e ~ N(0, sigma^2 w^2)`.
pub fn perturbed_descent(toy: &DoubleWell, w0: f64, sigma: f64, lr: f64, steps: usize, seed: u64) -> Result<f64> {
    let mut w = w0;
    for t in 0..steps {
        let record = PerturbationRecord {
            layer_id: "toy".into(),
            seed_label: seed_label(seed, "toy", t as u64, 0),
            sigma,
            filter_norms: vec![w.abs()],
            fan_in: 1,
        };
        let e = sample_perturbation(&record)?.data()[0];
        w -= lr * toy.grad(w + e);
    }
    Ok(w)
}

/// Monte-Carlo estimate of `E[L(w + e)]`, `e ~ N(0, sigma^2)`, on each grid
/// point with the same draws (common random numbers).
pub fn mc_smoothed(toy: &DoubleWell, grid: &[f64], sigma: f64, samples: usize, seed: u64) -> Vec<f64> {
    let z = RngStream::new(seed).derive_str("smoothing").peek_normals(samples);
    grid.iter().map(|&w| z.iter().map(|zi| toy.loss(w + sigma * zi)).sum::<f64>() / samples as f64).collect()
}

/// Largest absolute second difference divided by `h^2`.
pub fn curvature_proxy(values: &[f64], h: f64) -> f64 {
    values.windows(3).map(|w| ((w[2] - 2.0 * w[1] + w[0]) / (h * h)).abs()).fold(0.0, f64::max)
}

/// `L'(w + rho * sign(L'(w)))`: one-dimensional first-order SAM gradient.
pub fn sam_gradient_1d(grad: impl Fn(f64) -> f64, w: f64, rho: f64) -> f64 {
    let g = grad(w);
    if g == 0.0 {
        return g;
    }
    grad(w + rho * g / g.abs())
}

/// Uniform grid of `points` values on `[lo, hi]`.
pub fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + step * i as f64).collect()
}
