//! Loss surfaces around merged weights.
//!
//! Directions are drawn per weight matrix and rescaled filter by filter so
//! that row `i` of the direction has the norm of row `i` of the weight.
//! Every grid cell evaluates its own copy of the weights, so cells can run
//! in parallel and the base weights are never touched.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Something whose loss can be evaluated at arbitrary weights.
pub trait LossProbe: Sync {
    /// Weights at the center of the probe, one tensor per layer.
    fn base(&self) -> &[Tensor];
    fn loss_at(&self, weights: &[Tensor]) -> Result<f64>;
}

/// A model's merged snapshot evaluated on a fixed batch.
pub struct ModelProbe {
    snapshot: Model,
    batch: Batch,
    base: Vec<Tensor>,
}

impl ModelProbe {
    /// Adapters are merged into the weights; every linear layer is probed.
    pub fn new(model: &Model, batch: Batch) -> Self {
        let snapshot = model.merged_snapshot();
        let base = snapshot.linears().iter().map(|l| snapshot.param(l.weight).tensor.clone()).collect();
        Self { snapshot, batch, base }
    }

    pub fn snapshot(&self) -> &Model {
        &self.snapshot
    }
}

impl LossProbe for ModelProbe {
    fn base(&self) -> &[Tensor] {
        &self.base
    }

    fn loss_at(&self, weights: &[Tensor]) -> Result<f64> {
        self.snapshot.with_linear_weights(weights)?.loss(&self.batch)
    }
}

/// `curvature / 2 * |w - center|^2`, probed around `base`.
pub struct QuadraticProbe {
    pub base: Vec<Tensor>,
    pub center: Vec<Tensor>,
    pub curvature: f64,
}

impl LossProbe for QuadraticProbe {
    fn base(&self) -> &[Tensor] {
        &self.base
    }

    fn loss_at(&self, weights: &[Tensor]) -> Result<f64> {
        let mut sq = 0.0;
        for (w, c) in weights.iter().zip(&self.center) {
            sq += w.sub(c)?.frobenius_sq();
        }
        Ok(0.5 * self.curvature * sq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub layers: Vec<Tensor>,
    pub filter_normalized: bool,
    pub seed_label: Option<RngStream>,
}

impl Direction {
    /// A fixed, unnormalized direction.
    pub fn raw(layers: Vec<Tensor>) -> Self {
        Self { layers, filter_normalized: false, seed_label: None }
    }
}

fn filters(t: &Tensor) -> usize {
    if t.shape().len() == 1 {
        1
    } else {
        t.len() / t.last_dim()
    }
}

/// Gaussian direction with each filter rescaled to the matching weight filter's norm.
/// Zero weight rows give zero direction rows.
pub fn filter_normalized_direction(base: &[Tensor], label: RngStream) -> Direction {
    let layers = base
        .iter()
        .enumerate()
        .map(|(l, w)| {
            let mut d = label.derive(l as u64).peek_normals(w.len());
            let width = w.len() / filters(w);
            for (drow, wrow) in d.chunks_mut(width).zip(w.data().chunks(width)) {
                let wn = wrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dn = drow.iter().map(|v| v * v).sum::<f64>().sqrt();
                let k = if wn == 0.0 || dn == 0.0 { 0.0 } else { wn / dn };
                drow.iter_mut().for_each(|v| *v *= k);
            }
            Tensor::new(w.shape().to_vec(), d).expect("shape copied from weight")
        })
        .collect();
    Direction { layers, filter_normalized: true, seed_label: Some(label) }
}

/// `k` evenly spaced points on `[-radius, radius]`; `k` odd so the middle point is exactly zero.
pub fn axis(resolution: usize, radius: f64) -> Result<Vec<f64>> {
    if resolution.is_multiple_of(2) {
        return Err(Error::Contract(format!("grid resolution must be odd, got {resolution}")));
    }
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::Contract(format!("radius must be finite and nonnegative, got {radius}")));
    }
    if resolution == 1 {
        return Ok(vec![0.0]);
    }
    let half = (resolution / 2) as f64;
    Ok((0..resolution).map(|i| radius * ((i as f64 - half) / half)).collect())
}

fn shifted(base: &[Tensor], dirs: &[&Direction], coeffs: &[f64]) -> Result<Vec<Tensor>> {
    base.iter()
        .enumerate()
        .map(|(l, w)| {
            let mut out = w.clone().with_grad(false);
            for (d, &c) in dirs.iter().zip(coeffs) {
                let dl = &d.layers[l];
                if dl.shape() != w.shape() {
                    return Err(Error::Dimension(format!("direction layer {l} does not match its weight")));
                }
                out.data_mut().iter_mut().zip(dl.data()).for_each(|(v, dv)| *v += c * dv);
            }
            Ok(out)
        })
        .collect()
}

/// 64-bit fingerprint of the probed weights.
pub fn fingerprint(weights: &[Tensor]) -> String {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for w in weights {
        for v in w.data() {
            for b in v.to_bits().to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01B3);
            }
        }
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub dims: usize,
    pub radius: f64,
    pub alphas: Vec<f64>,
    /// Empty for a 1D grid.
    pub betas: Vec<f64>,
    /// Row-major over `(alpha, beta)`. Non-finite losses are stored as `+inf`.
    pub values: Vec<f64>,
    pub origin_loss: f64,
    pub dataset_id: String,
    pub snapshot_id: String,
    pub seed_labels: Vec<Option<RngStream>>,
}

impl LandscapeGrid {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        let width = self.betas.len().max(1);
        self.values[i * width + j]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["alpha", "beta", "loss"])?;
        for (i, a) in self.alphas.iter().enumerate() {
            if self.betas.is_empty() {
                w.write_record([a.to_string(), String::new(), self.value(i, 0).to_string()])?;
            }
            for (j, b) in self.betas.iter().enumerate() {
                w.write_record([a.to_string(), b.to_string(), self.value(i, j).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn to_json(&self, path: &Path) -> Result<()> {
        // JSON has no infinity; the sentinel is written as null.
        let mut v = serde_json::to_value(self)?;
        v["values"] = self.values.iter().map(|x| if x.is_finite() { serde_json::json!(x) } else { serde_json::Value::Null }).collect();
        std::fs::write(path, serde_json::to_vec_pretty(&v)?)?;
        Ok(())
    }
}

/// Loss on a `resolution` (x `resolution`) grid along one or two directions.
pub fn loss_surface<P: LossProbe>(
    probe: &P,
    dirs: &[Direction],
    resolution: usize,
    radius: f64,
    dataset_id: &str,
) -> Result<LandscapeGrid> {
    if dirs.is_empty() || dirs.len() > 2 {
        return Err(Error::Contract(format!("need one or two directions, got {}", dirs.len())));
    }
    let base = probe.base();
    for d in dirs {
        if d.layers.len() != base.len() {
            return Err(Error::Dimension("direction has the wrong number of layers".into()));
        }
    }
    let alphas = axis(resolution, radius)?;
    let betas = if dirs.len() == 2 { alphas.clone() } else { Vec::new() };
    let origin = probe.loss_at(base)?;
    let mid = resolution / 2;
    let width = betas.len().max(1);
    let refs: Vec<&Direction> = dirs.iter().collect();
    let values = (0..alphas.len() * width)
        .into_par_iter()
        .map(|cell| {
            let (i, j) = (cell / width, cell % width);
            if i == mid && (betas.is_empty() || j == mid) {
                return Ok(origin);
            }
            let coeffs: Vec<f64> = if betas.is_empty() { vec![alphas[i]] } else { vec![alphas[i], betas[j]] };
            let w = shifted(base, &refs, &coeffs)?;
            let loss = probe.loss_at(&w)?;
            Ok(if loss.is_finite() { loss } else { f64::INFINITY })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LandscapeGrid {
        dims: dirs.len(),
        radius,
        alphas,
        betas,
        values,
        origin_loss: origin,
        dataset_id: dataset_id.to_string(),
        snapshot_id: fingerprint(base),
        seed_labels: dirs.iter().map(|d| d.seed_label).collect(),
    })
}

/// Mean over `samples` filter-normalized directions of
/// `max(L(W' + r d), L(W' - r d)) - L(W')`.
pub fn sharpness_metric<P: LossProbe>(probe: &P, radius: f64, samples: usize, label: RngStream) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Contract("sharpness needs at least one direction".into()));
    }
    let base = probe.base();
    let center = probe.loss_at(base)?;
    if radius == 0.0 {
        return Ok(0.0);
    }
    let rises = (0..samples)
        .into_par_iter()
        .map(|s| {
            let d = filter_normalized_direction(base, label.derive(s as u64));
            let plus = probe.loss_at(&shifted(base, &[&d], &[radius])?)?;
            let minus = probe.loss_at(&shifted(base, &[&d], &[-radius])?)?;
            Ok(plus.max(minus) - center)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(rises.iter().sum::<f64>() / samples as f64)
}

/// Metrics at one evaluation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub step: usize,
    /// Train accuracy minus test accuracy.
    pub accuracy_gap: Option<f64>,
    /// Test loss minus train loss.
    pub loss_gap: f64,
}

pub fn generalization_gap(train: &[EvalPoint], test: &[EvalPoint]) -> Result<Vec<GapPoint>> {
    if train.len() != test.len() || train.iter().zip(test).any(|(a, b)| a.step != b.step) {
        return Err(Error::Contract("train and test series are not aligned".into()));
    }
    Ok(train
        .iter()
        .zip(test)
        .map(|(tr, te)| GapPoint {
            step: tr.step,
            accuracy_gap: tr.accuracy.zip(te.accuracy).map(|(a, b)| a - b),
            loss_gap: te.loss - tr.loss,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Inputs, ModelSpec, Targets};

    fn model_and_batch() -> (Model, Batch) {
        let mut m = build_model(&ModelSpec::mlp(vec![3, 8, 2]), 0).unwrap();
        let mut s = RngStream::new(1);
        for site in m.adapted_sites() {
            let bid = m.linears()[site].adapter.as_ref().unwrap().b;
            let n = m.param(bid).tensor.len();
            m.param_mut(bid).tensor.data_mut().copy_from_slice(&s.normals(n));
        }
        let x = Tensor::new(vec![10, 3], s.normals(30)).unwrap();
        let batch = Batch { inputs: Inputs::Features(x), targets: Targets::Classes((0..10).map(|i| i % 2).collect()) };
        (m, batch)
    }

    #[test]
    fn direction_rows_match_weight_rows() {
        let w = Tensor::from_rows(&[vec![3.0, 4.0, 0.0], vec![0.0, 0.0, 0.0], vec![1.0, -2.0, 2.0]]).unwrap();
        let d = filter_normalized_direction(std::slice::from_ref(&w), RngStream::new(4));
        let norms = d.layers[0].row_norms();
        assert!((norms[0] - 5.0).abs() < 5e-12);
        assert_eq!(norms[1], 0.0);
        assert!((norms[2] - 3.0).abs() < 3e-12);
    }

    #[test]
    fn odd_axis_has_exact_zero_and_symmetry() {
        let a = axis(201, 1.0).unwrap();
        assert_eq!(a[100], 0.0);
        assert_eq!(a[0], -1.0);
        assert_eq!(a[200], 1.0);
        for i in 0..201 {
            assert_eq!(a[i], -a[200 - i]);
        }
        assert!(axis(4, 1.0).is_err());
    }

    #[test]
    fn origin_is_exact_and_weights_untouched() {
        let (m, batch) = model_and_batch();
        let before = m.clone();
        let probe = ModelProbe::new(&m, batch.clone());
        let d1 = filter_normalized_direction(probe.base(), RngStream::new(1));
        let d2 = filter_normalized_direction(probe.base(), RngStream::new(2));
        let g = loss_surface(&probe, &[d1, d2], 5, 0.5, "test").unwrap();
        assert_eq!(g.values.len(), 25);
        assert_eq!(g.value(2, 2), probe.snapshot().loss(&batch).unwrap());
        assert_eq!(m, before);
        assert!(g.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn grid_is_deterministic() {
        let (m, batch) = model_and_batch();
        let probe = ModelProbe::new(&m, batch);
        let d = filter_normalized_direction(probe.base(), RngStream::new(7));
        let a = loss_surface(&probe, std::slice::from_ref(&d), 11, 1.0, "t").unwrap();
        let b = loss_surface(&probe, &[d], 11, 1.0, "t").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quadratic_symmetry_and_closed_form() {
        let probe = QuadraticProbe { base: vec![Tensor::zeros(&[1])], center: vec![Tensor::zeros(&[1])], curvature: 2.0 };
        let d = Direction::raw(vec![Tensor::new(vec![1], vec![1.0]).unwrap()]);
        let g = loss_surface(&probe, &[d], 21, 1.0, "quadratic").unwrap();
        for (i, a) in g.alphas.iter().enumerate() {
            assert_eq!(g.values[i], g.values[20 - i]);
            assert!((g.values[i] - a * a).abs() < 1e-15);
        }
    }

    #[test]
    fn sharpness_zero_radius_and_quadratic() {
        let c = Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25]]).unwrap();
        let probe = QuadraticProbe { base: vec![c.clone()], center: vec![c.clone()], curvature: 3.0 };
        assert_eq!(sharpness_metric(&probe, 0.0, 4, RngStream::new(0)).unwrap(), 0.0);
        // |d|^2 = |c|^2 for filter-normalized d, so each rise is r^2 h |c|^2 / 2.
        let r = 0.2;
        let want = r * r * 3.0 * c.frobenius_sq() / 2.0;
        let got = sharpness_metric(&probe, r, 8, RngStream::new(0)).unwrap();
        assert!((got - want).abs() < 1e-12 * want);
    }

    #[test]
    fn gap_arithmetic_and_alignment() {
        let tr = [EvalPoint { step: 10, loss: 0.1, accuracy: Some(0.98) }];
        let te = [EvalPoint { step: 10, loss: 0.4, accuracy: Some(0.91) }];
        let g = generalization_gap(&tr, &te).unwrap();
        assert!((g[0].accuracy_gap.unwrap() - 0.07).abs() < 1e-12);
        assert!((g[0].loss_gap - 0.3).abs() < 1e-12);
        assert_eq!(generalization_gap(&tr, &tr).unwrap()[0].loss_gap, 0.0);
        let bad = [EvalPoint { step: 11, ..te[0] }];
        assert!(matches!(generalization_gap(&tr, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn exports() {
        let probe = QuadraticProbe { base: vec![Tensor::zeros(&[1])], center: vec![Tensor::zeros(&[1])], curvature: 2.0 };
        let d = Direction::raw(vec![Tensor::new(vec![1], vec![1.0]).unwrap()]);
        let g = loss_surface(&probe, &[d.clone(), d], 3, 1.0, "q").unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert!(text.starts_with("alpha,beta,loss"));
        let dir = tempfile::tempdir().unwrap();
        g.to_json(&dir.path().join("g.json")).unwrap();
        let back: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("g.json")).unwrap()).unwrap();
        assert_eq!(back["dims"], 2);
    }
}
