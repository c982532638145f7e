//! Algebra of adapter-space SAM perturbations.
//!
//! With `G = dL/dW'`, first-order SAM on `(A, B)` perturbs
//! `eps_A = c B^T G` and `eps_B = c G A^T`, where
//! `c = rho / sqrt(|B^T G|^2 + |G A^T|^2)`. The induced weight perturbation is
//!
//! ```text
//! eps_W = B eps_A + eps_B A + eps_B eps_A
//!       = c (B B^T G + G A^T A) + c^2 G A^T B^T G
//! ```
//!
//! and the share carried by `eps_B A` is the ratio statistic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Returned in place of the ratio when `eps_W` vanishes.
pub const RATIO_SENTINEL: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioNorm {
    #[default]
    Frobenius,
    Spectral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPerturbation {
    pub eps_a: Tensor,
    pub eps_b: Tensor,
    pub c: f64,
    /// The joint gradient norm was zero; both perturbations are zero.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equivalent {
    pub eps_w: Tensor,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    pub degenerate: bool,
}

fn check_shapes(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(usize, usize, usize)> {
    let (r, n) = a.dims2()?;
    let (m, rb) = b.dims2()?;
    if rb != r || g.shape() != [m, n] {
        return Err(Error::Dimension(format!("A {:?}, B {:?}, G {:?} are not consistent", a.shape(), b.shape(), g.shape())));
    }
    Ok((m, n, r))
}

/// `B^T G`, `G A^T` and the normalizer `c`.
fn projected(a: &Tensor, b: &Tensor, g: &Tensor, rho: f64) -> Result<(Tensor, Tensor, f64)> {
    check_shapes(a, b, g)?;
    let bt_g = b.transpose()?.matmul(g)?;
    let g_at = g.matmul(&a.transpose()?)?;
    let denom = (bt_g.frobenius_sq() + g_at.frobenius_sq()).sqrt();
    let c = if denom > 0.0 { rho / denom } else { 0.0 };
    Ok((bt_g, g_at, c))
}

/// `eps_A = c B^T G`, `eps_B = c G A^T`.
pub fn perturbation_terms(a: &Tensor, b: &Tensor, g: &Tensor, rho: f64) -> Result<AdapterPerturbation> {
    let (bt_g, g_at, c) = projected(a, b, g, rho)?;
    Ok(AdapterPerturbation { eps_a: bt_g.scale(c), eps_b: g_at.scale(c), c, degenerate: c == 0.0 })
}

/// `B eps_A + eps_B A + eps_B eps_A`, term by term.
pub fn expanded_perturbation(a: &Tensor, b: &Tensor, eps_a: &Tensor, eps_b: &Tensor) -> Result<Tensor> {
    b.matmul(eps_a)?.add(&eps_b.matmul(a)?)?.add(&eps_b.matmul(eps_a)?)
}

/// Closed form `c (B B^T G + G A^T A) + c^2 G A^T B^T G`.
pub fn equivalent_perturbation(a: &Tensor, b: &Tensor, g: &Tensor, rho: f64) -> Result<Equivalent> {
    let (bt_g, g_at, c) = projected(a, b, g, rho)?;
    if c == 0.0 {
        return Ok(Equivalent { eps_w: Tensor::zeros(g.shape()), degenerate: true });
    }
    let first = b.matmul(&bt_g)?.add(&g_at.matmul(a)?)?.scale(c);
    let second = g_at.matmul(&bt_g)?.scale(c * c);
    Ok(Equivalent { eps_w: first.add(&second)?, degenerate: false })
}

/// Dominant term `eps_B A = (c G A^T) A`; the whole perturbation when `B = 0`.
pub fn approx_equivalent(a: &Tensor, b: &Tensor, g: &Tensor, rho: f64) -> Result<Tensor> {
    let (_, g_at, c) = projected(a, b, g, rho)?;
    g_at.scale(c).matmul(a)
}

pub fn matrix_norm(t: &Tensor, norm: RatioNorm) -> Result<f64> {
    match norm {
        RatioNorm::Frobenius => Ok(t.frobenius()),
        RatioNorm::Spectral => spectral_norm(t),
    }
}

/// Largest singular value by power iteration on `T^T T`.
pub fn spectral_norm(t: &Tensor) -> Result<f64> {
    let (_, n) = t.dims2()?;
    let tt = t.transpose()?;
    let gram = tt.matmul(t)?;
    let mut v = Tensor::new(vec![n, 1], (0..n).map(|j| 1.0 + 0.37 * j as f64).collect())?;
    let mut lambda = 0.0;
    for _ in 0..2000 {
        let w = gram.matmul(&v)?;
        let norm = w.frobenius();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = norm / v.frobenius();
        v = w.scale(1.0 / norm);
        if (next - lambda).abs() <= 1e-15 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    Ok(lambda.sqrt())
}

/// `|eps_B A| / |eps_W|` for given adapter perturbations.
pub fn ratio_from_terms(a: &Tensor, b: &Tensor, eps_a: &Tensor, eps_b: &Tensor, norm: RatioNorm) -> Result<Ratio> {
    let eps_w = expanded_perturbation(a, b, eps_a, eps_b)?;
    let total = matrix_norm(&eps_w, norm)?;
    if total == 0.0 {
        return Ok(Ratio { value: RATIO_SENTINEL, degenerate: true });
    }
    let part = matrix_norm(&eps_b.matmul(a)?, norm)?;
    Ok(Ratio { value: part / total, degenerate: false })
}

pub fn ratio_statistic(a: &Tensor, b: &Tensor, g: &Tensor, rho: f64, norm: RatioNorm) -> Result<Ratio> {
    let p = perturbation_terms(a, b, g, rho)?;
    if p.degenerate {
        return Ok(Ratio { value: RATIO_SENTINEL, degenerate: true });
    }
    ratio_from_terms(a, b, &p.eps_a, &p.eps_b, norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random(shape: &[usize], s: &mut RngStream) -> Tensor {
        Tensor::new(shape.to_vec(), s.normals(shape.iter().product())).unwrap()
    }

    #[test]
    fn zero_b_makes_the_approximation_exact() {
        let mut s = RngStream::new(1);
        let a = random(&[2, 7], &mut s);
        let b = Tensor::zeros(&[5, 2]);
        let g = random(&[5, 7], &mut s);
        let eq = equivalent_perturbation(&a, &b, &g, 0.1).unwrap();
        let approx = approx_equivalent(&a, &b, &g, 0.1).unwrap();
        assert!(eq.eps_w.max_abs_diff(&approx) <= 1e-15 * approx.frobenius());
        let p = perturbation_terms(&a, &b, &g, 0.1).unwrap();
        assert!(p.eps_a.data().iter().all(|&v| v == 0.0));
        let expanded = expanded_perturbation(&a, &b, &p.eps_a, &p.eps_b).unwrap();
        assert!(expanded.bit_eq(&approx));
        let r = ratio_statistic(&a, &b, &g, 0.1, RatioNorm::Frobenius).unwrap();
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn zero_a_gives_zero_ratio() {
        let mut s = RngStream::new(2);
        let a = Tensor::zeros(&[2, 7]);
        let b = random(&[5, 2], &mut s);
        let g = random(&[5, 7], &mut s);
        let r = ratio_statistic(&a, &b, &g, 0.1, RatioNorm::Frobenius).unwrap();
        assert_eq!(r, Ratio { value: 0.0, degenerate: false });
    }

    #[test]
    fn zero_gradient_is_flagged() {
        let mut s = RngStream::new(3);
        let a = random(&[2, 4], &mut s);
        let b = random(&[3, 2], &mut s);
        let g = Tensor::zeros(&[3, 4]);
        let eq = equivalent_perturbation(&a, &b, &g, 0.1).unwrap();
        assert!(eq.degenerate && eq.eps_w.data().iter().all(|&v| v == 0.0));
        let r = ratio_statistic(&a, &b, &g, 0.1, RatioNorm::Frobenius).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.value, RATIO_SENTINEL);
    }

    #[test]
    fn adapter_perturbation_has_norm_rho() {
        let mut s = RngStream::new(4);
        let a = random(&[3, 6], &mut s);
        let b = random(&[4, 3], &mut s);
        let g = random(&[4, 6], &mut s);
        let p = perturbation_terms(&a, &b, &g, 0.05).unwrap();
        let norm = (p.eps_a.frobenius_sq() + p.eps_b.frobenius_sq()).sqrt();
        assert!((norm - 0.05).abs() < 1e-15);
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let t = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, -5.0], vec![0.0, 0.0]]).unwrap();
        assert!((spectral_norm(&t).unwrap() - 5.0).abs() < 1e-12);
        let mut s = RngStream::new(5);
        let r = random(&[6, 4], &mut s);
        let sn = spectral_norm(&r).unwrap();
        assert!(sn <= r.frobenius() && sn >= r.frobenius() / 2.0);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let g = Tensor::zeros(&[4, 4]);
        assert!(matches!(equivalent_perturbation(&a, &b, &g, 0.1), Err(Error::Dimension(_))));
    }
}
