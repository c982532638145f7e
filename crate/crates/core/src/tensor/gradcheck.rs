//! Central finite-difference gradient checking.
//!
//! Evaluates a scalar function of several tensors twice per input element,
//! without calling `backward`, and compares against the tape's gradients.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Step used by the default check.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest relative error over the inputs: `|a - fd| / max(|a|, |fd|, floor)`.
    pub max_rel_err: f64,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

fn eval<F>(f: &F, inputs: &[Tensor], track: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad(track))).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(Error::Contract("gradcheck target must be scalar".into()));
    }
    Ok((g, vars, out))
}

/// Compares tape gradients of `f` against central differences with step `h`.
///
/// The relative error of each input is computed on the whole gradient
/// vector (Euclidean norms) with a denominator floor of `1e-8`.
pub fn check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = eval(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().zip(inputs).map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let (gp, _, op) = eval(&f, &work, false)?;
            let fp = gp.value(op).data()[0];
            work[k].data_mut()[i] = orig - h;
            let (gm, _, om) = eval(&f, &work, false)?;
            let fm = gm.value(om).data()[0];
            work[k].data_mut()[i] = orig;
            col.push((fp - fm) / (2.0 * h));
        }
        numeric.push(col);
    }

    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            diff / na.max(nn).max(1e-8)
        })
        .fold(0.0, f64::max);
    Ok(GradCheck { max_rel_err, analytic, numeric })
}
