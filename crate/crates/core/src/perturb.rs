//! Filter-norm-scaled random weight perturbations with exact seed replay.
//!
//! For a linear layer with merged weight `W' = W + sBA` of shape `[m x n]`,
//! each entry of the perturbation is drawn as
//!
//! ```text
//! eps[i, j] ~ N(0, sigma^2 * ||W'[i, :]||^2 / n)
//! ```
//!
//! Only a [`PerturbationRecord`] (a counter-addressed seed label, `sigma`,
//! and the `m` filter norms) is kept between applying and removing the
//! perturbation; the `[m x n]` noise is regenerated on demand.
//!
//! Perturbations are added in place to the frozen base weight. Frozen
//! tensors are stored on a fixed-point lattice (multiples of `2^-40`,
//! magnitude below `2^12`) and applied noise is rounded onto the same
//! lattice, so `(w + e) - e == w` holds bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ParamKind};
use crate::rng::{label_hash, mix, RngStream};
use crate::tensor::Tensor;

/// `2^40`: lattice points per unit.
pub const LATTICE_SCALE: f64 = 1_099_511_627_776.0;
/// Frozen values and perturbed values must stay strictly below this magnitude.
pub const LATTICE_BOUND: f64 = 4096.0;

/// Rounds `x` to the nearest multiple of `2^-40` (negative zero becomes `+0`).
pub fn snap_to_lattice(x: f64) -> f64 {
    (x * LATTICE_SCALE).round() / LATTICE_SCALE + 0.0
}

fn on_lattice(x: f64) -> bool {
    x.abs() < LATTICE_BOUND && snap_to_lattice(x) == x
}

/// Euclidean norm of every filter (row) of a merged weight.
pub fn filter_norms(merged: &Tensor) -> Vec<f64> {
    merged.row_norms()
}

/// Counter-addressed seed label for `(experiment seed, layer, step, sample)`.
pub fn seed_label(seed: u64, layer_id: &str, step: u64, sample: u64) -> RngStream {
    let mut stream = mix(label_hash(layer_id), step);
    if sample > 0 {
        stream = mix(stream, sample);
    }
    RngStream { seed, stream, counter: 0 }
}

/// Everything needed to regenerate one layer's perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub layer_id: String,
    pub seed_label: RngStream,
    pub sigma: f64,
    pub filter_norms: Vec<f64>,
    pub fan_in: usize,
}

impl PerturbationRecord {
    pub fn out_features(&self) -> usize {
        self.filter_norms.len()
    }

    /// Floats held between apply and remove: one norm per filter.
    pub fn persistent_floats(&self) -> usize {
        self.filter_norms.len()
    }
}

/// Draws the layer's noise matrix from its record.
///
/// `sigma == 0` returns exact zeros without touching the generator.
pub fn sample_perturbation(record: &PerturbationRecord) -> Result<Tensor> {
    let (m, n) = (record.out_features(), record.fan_in);
    if !(record.sigma >= 0.0) {
        return Err(Error::Contract(format!("sigma must be nonnegative, got {}", record.sigma)));
    }
    if n == 0 || m == 0 {
        return Err(Error::Contract("perturbation needs positive dimensions".into()));
    }
    if record.sigma == 0.0 {
        return Ok(Tensor::zeros(&[m, n]));
    }
    let z = record.seed_label.peek_normals(m * n);
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();
    let data = z
        .chunks(n)
        .zip(&record.filter_norms)
        .flat_map(|(row, &norm)| {
            let std = record.sigma * norm * inv_sqrt_n;
            row.iter().map(move |v| v * std)
        })
        .collect();
    Tensor::new(vec![m, n], data)
}

/// The exact increment applied to the weight: the sampled noise rounded onto the lattice.
pub fn lattice_perturbation(record: &PerturbationRecord) -> Result<Tensor> {
    Ok(sample_perturbation(record)?.map(snap_to_lattice))
}

/// Elementwise noise `eps[k] ~ N(0, sigma^2 |p[k]|^2)` for non-linear parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementwiseRecord {
    pub param: String,
    pub seed_label: RngStream,
    pub sigma: f64,
    pub magnitudes: Vec<f64>,
}

impl ElementwiseRecord {
    pub fn persistent_floats(&self) -> usize {
        self.magnitudes.len()
    }
}

pub fn sample_elementwise(record: &ElementwiseRecord) -> Vec<f64> {
    if record.sigma == 0.0 {
        return vec![0.0; record.magnitudes.len()];
    }
    let z = record.seed_label.peek_normals(record.magnitudes.len());
    z.iter().zip(&record.magnitudes).map(|(z, m)| z * record.sigma * m).collect()
}

/// Perturbations currently applied to a model's weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivePerturbations {
    pub(crate) filters: BTreeMap<String, PerturbationRecord>,
    pub(crate) elementwise: BTreeMap<String, ElementwiseRecord>,
}

impl ActivePerturbations {
    pub fn is_empty(&self) -> bool {
        self.filters.is_empty() && self.elementwise.is_empty()
    }
}

/// Records for every adapted linear layer, norms taken on the current merged weights.
pub fn sample_layers(model: &Model, sigma: f64, seed: u64, step: u64, sample: u64) -> Vec<PerturbationRecord> {
    model.adapted_sites().into_iter().map(|site| layer_record(model, site, sigma, seed, step, sample)).collect()
}

fn layer_record(model: &Model, site: usize, sigma: f64, seed: u64, step: u64, sample: u64) -> PerturbationRecord {
    let l = &model.linears()[site];
    let norms = if sigma == 0.0 { vec![0.0; l.out_features] } else { filter_norms(&model.merged_weight(site)) };
    PerturbationRecord {
        layer_id: l.id.clone(),
        seed_label: seed_label(seed, &l.id, step, sample),
        sigma,
        filter_norms: norms,
        fan_in: l.in_features,
    }
}

fn site_weight(model: &Model, layer_id: &str) -> Result<usize> {
    let site = model.site(layer_id).ok_or_else(|| Error::State(format!("no linear layer named {layer_id}")))?;
    let wid = model.linears()[site].weight;
    if model.param(wid).trainable {
        return Err(Error::State(format!("{layer_id}: in-place perturbation needs a frozen weight")));
    }
    Ok(wid)
}

fn add_checked(dst: &mut [f64], delta: &[f64], sign: f64, what: &str) -> Result<()> {
    if let Some((w, e)) =
        dst.iter().zip(delta).find(|(w, e)| !on_lattice(**w) || !on_lattice(**e) || (**w + sign * **e).abs() >= LATTICE_BOUND)
    {
        return Err(Error::State(format!("{what}: value {w} or increment {e} leaves the perturbation lattice")));
    }
    dst.iter_mut().zip(delta).for_each(|(w, e)| *w += sign * e);
    Ok(())
}

/// Adds each record's noise into its layer's frozen weight.
pub fn apply_perturbation(model: &mut Model, records: &[PerturbationRecord]) -> Result<()> {
    let mut plan = Vec::with_capacity(records.len());
    for r in records {
        if model.active.filters.contains_key(&r.layer_id) {
            return Err(Error::State(format!("{} is already perturbed", r.layer_id)));
        }
        let wid = site_weight(model, &r.layer_id)?;
        if model.param(wid).tensor.shape() != [r.out_features(), r.fan_in] {
            return Err(Error::Dimension(format!("record shape does not match {}", r.layer_id)));
        }
        plan.push((wid, lattice_perturbation(r)?));
    }
    for ((wid, eps), r) in plan.iter().zip(records) {
        if r.sigma != 0.0 {
            add_checked(model.param_mut(*wid).tensor.data_mut(), eps.data(), 1.0, &r.layer_id)?;
        }
        model.active.filters.insert(r.layer_id.clone(), r.clone());
    }
    Ok(())
}

/// Regenerates each record's noise and subtracts it, restoring the weights exactly.
pub fn remove_perturbation(model: &mut Model, records: &[PerturbationRecord]) -> Result<()> {
    for r in records {
        match model.active.filters.get(&r.layer_id) {
            Some(active) if active == r => {}
            Some(_) => return Err(Error::State(format!("{}: record does not match the applied one", r.layer_id))),
            None => return Err(Error::State(format!("{}: remove without matching apply", r.layer_id))),
        }
    }
    for r in records {
        let wid = site_weight(model, &r.layer_id)?;
        if r.sigma != 0.0 {
            let eps = lattice_perturbation(r)?;
            add_checked(model.param_mut(wid).tensor.data_mut(), eps.data(), -1.0, &r.layer_id)?;
        }
        model.active.filters.remove(&r.layer_id);
    }
    Ok(())
}

/// Records for the all-layers variant.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AllLayerRecords {
    pub filters: Vec<PerturbationRecord>,
    pub elementwise: Vec<ElementwiseRecord>,
}

impl AllLayerRecords {
    pub fn persistent_floats(&self) -> usize {
        self.filters.iter().map(PerturbationRecord::persistent_floats).sum::<usize>()
            + self.elementwise.iter().map(ElementwiseRecord::persistent_floats).sum::<usize>()
    }
}

/// Perturbs every frozen linear weight by filter norms and every other
/// frozen parameter (biases, norm gains/biases, embeddings) elementwise by
/// its own magnitude. Trainable parameters are left alone.
pub fn sample_all_layers(model: &Model, sigma: f64, seed: u64, step: u64, sample: u64) -> AllLayerRecords {
    let mut out = AllLayerRecords::default();
    for (site, l) in model.linears().iter().enumerate() {
        if !model.param(l.weight).trainable {
            out.filters.push(layer_record(model, site, sigma, seed, step, sample));
        }
    }
    for p in model.params() {
        if p.trainable || p.kind == ParamKind::LinearWeight {
            continue;
        }
        out.elementwise.push(ElementwiseRecord {
            param: p.name.clone(),
            seed_label: seed_label(seed, &p.name, step, sample),
            sigma,
            magnitudes: p.tensor.data().iter().map(|v| v.abs()).collect(),
        });
    }
    out
}

pub fn apply_all_layers(model: &mut Model, records: &AllLayerRecords) -> Result<()> {
    for r in &records.elementwise {
        if model.active.elementwise.contains_key(&r.param) {
            return Err(Error::State(format!("{} is already perturbed", r.param)));
        }
        if model.param_by_name(&r.param).is_none() {
            return Err(Error::State(format!("no parameter named {}", r.param)));
        }
    }
    apply_perturbation(model, &records.filters)?;
    for r in &records.elementwise {
        let id = model.param_by_name(&r.param).expect("checked above");
        let eps: Vec<f64> = sample_elementwise(r).into_iter().map(snap_to_lattice).collect();
        if r.sigma != 0.0 {
            add_checked(model.param_mut(id).tensor.data_mut(), &eps, 1.0, &r.param)?;
        }
        model.active.elementwise.insert(r.param.clone(), r.clone());
    }
    Ok(())
}

pub fn remove_all_layers(model: &mut Model, records: &AllLayerRecords) -> Result<()> {
    for r in &records.elementwise {
        if model.active.elementwise.get(&r.param) != Some(r) {
            return Err(Error::State(format!("{}: remove without matching apply", r.param)));
        }
    }
    remove_perturbation(model, &records.filters)?;
    for r in &records.elementwise {
        let id = model.param_by_name(&r.param).expect("applied earlier");
        let eps: Vec<f64> = sample_elementwise(r).into_iter().map(snap_to_lattice).collect();
        if r.sigma != 0.0 {
            add_checked(model.param_mut(id).tensor.data_mut(), &eps, -1.0, &r.param)?;
        }
        model.active.elementwise.remove(&r.param);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    #[default]
    CosineIncrease,
}

/// Per-step perturbation strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub sigma_max: f64,
    pub total_steps: usize,
    pub kind: ScheduleKind,
}

impl SigmaSchedule {
    pub fn new(sigma_max: f64, total_steps: usize, kind: ScheduleKind) -> Result<Self> {
        if !(sigma_max >= 0.0) || !sigma_max.is_finite() {
            return Err(Error::Contract(format!("sigma_max must be finite and nonnegative, got {sigma_max}")));
        }
        if total_steps == 0 {
            return Err(Error::Contract("schedule needs at least one step".into()));
        }
        Ok(Self { sigma_max, total_steps, kind })
    }

    /// `sigma_max` for constant; `sigma_max * (1 - cos(pi t / T)) / 2` for cosine increase.
    pub fn sigma_at(&self, t: usize) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::Contract(format!("step {t} beyond schedule length {}", self.total_steps)));
        }
        Ok(match self.kind {
            ScheduleKind::Constant => self.sigma_max,
            ScheduleKind::CosineIncrease => {
                let phase = std::f64::consts::PI * t as f64 / self.total_steps as f64;
                self.sigma_max * (1.0 - phase.cos()) / 2.0
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};
    use proptest::prelude::*;

    fn record(norms: Vec<f64>, n: usize, sigma: f64, seed: u64) -> PerturbationRecord {
        PerturbationRecord { layer_id: "fc0".into(), seed_label: seed_label(seed, "fc0", 0, 0), sigma, filter_norms: norms, fan_in: n }
    }

    #[test]
    fn identity_norms() {
        assert_eq!(filter_norms(&Tensor::eye(3)), vec![1.0, 1.0, 1.0]);
        let t = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(filter_norms(&t), vec![5.0]);
    }

    #[test]
    fn norms_match_direct_formula() {
        let mut s = RngStream::new(4);
        let w = Tensor::new(vec![8, 8], s.normals(64)).unwrap();
        for (i, got) in filter_norms(&w).into_iter().enumerate() {
            let want = (0..8).map(|j| w.data()[i * 8 + j].powi(2)).sum::<f64>().sqrt();
            assert!((got - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn zero_sigma_is_zero_matrix() {
        let r = record(vec![1.0, 2.0], 3, 0.0, 1);
        assert!(sample_perturbation(&r).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_norm_row_is_zero() {
        let r = record(vec![0.0, 2.0], 50, 0.1, 1);
        let eps = sample_perturbation(&r).unwrap();
        assert!(eps.row(0).iter().all(|&v| v == 0.0));
        assert!(eps.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn per_element_std_matches_scale() {
        // norm 1, sigma 0.1, n 100 => std 0.01
        let n = 100;
        let mut sq = 0.0;
        let mut count = 0usize;
        for step in 0..1000u64 {
            let r = PerturbationRecord { seed_label: seed_label(3, "fc0", step, 0), ..record(vec![1.0], n, 0.1, 3) };
            for v in sample_perturbation(&r).unwrap().data() {
                sq += v * v;
                count += 1;
            }
        }
        let std = (sq / count as f64).sqrt();
        assert!((std / 0.01 - 1.0).abs() < 0.03, "std {std}");
    }

    #[test]
    fn apply_then_remove_is_bit_exact() {
        let spec = ModelSpec::mlp(vec![6, 10, 10, 3]);
        let mut m = build_model(&spec, 0).unwrap();
        for site in m.adapted_sites() {
            let bid = m.linears()[site].adapter.as_ref().unwrap().b;
            m.param_mut(bid).tensor.data_mut().iter_mut().for_each(|v| *v = 0.05);
        }
        let before = m.clone();
        let records = sample_layers(&m, 0.2, 99, 5, 0);
        apply_perturbation(&mut m, &records).unwrap();
        assert_ne!(m, before);
        remove_perturbation(&mut m, &records).unwrap();
        for (p, q) in m.params().iter().zip(before.params()) {
            assert!(p.tensor.bit_eq(&q.tensor), "{}", p.name);
        }
        assert!(m.active.is_empty());
    }

    #[test]
    fn remove_without_apply_is_a_state_error() {
        let mut m = build_model(&ModelSpec::mlp(vec![3, 4, 2]), 0).unwrap();
        let records = sample_layers(&m, 0.1, 0, 0, 0);
        assert!(matches!(remove_perturbation(&mut m, &records), Err(Error::State(_))));
        apply_perturbation(&mut m, &records).unwrap();
        assert!(matches!(apply_perturbation(&mut m, &records), Err(Error::State(_))));
        let other = sample_layers(&m, 0.1, 0, 1, 0);
        assert!(matches!(remove_perturbation(&mut m, &other), Err(Error::State(_))));
        remove_perturbation(&mut m, &records).unwrap();
    }

    #[test]
    fn record_memory_is_one_norm_per_filter() {
        let m = build_model(&ModelSpec::mlp(vec![5, 12, 3]), 0).unwrap();
        let records = sample_layers(&m, 0.1, 0, 0, 0);
        for (r, site) in records.iter().zip(m.adapted_sites()) {
            assert_eq!(r.persistent_floats(), m.linears()[site].out_features);
        }
    }

    #[test]
    fn all_layers_shares_the_linear_path_and_scales_by_magnitude() {
        let m = build_model(&ModelSpec::tiny_transformer(), 1).unwrap();
        let all = sample_all_layers(&m, 0.1, 7, 3, 0);
        let plain = sample_layers(&m, 0.1, 7, 3, 0);
        for r in &plain {
            let twin = all.filters.iter().find(|f| f.layer_id == r.layer_id).unwrap();
            assert!(sample_perturbation(r).unwrap().bit_eq(&sample_perturbation(twin).unwrap()));
        }
        let ln_bias = all.elementwise.iter().find(|r| r.param == "ln1.bias").unwrap();
        assert!(sample_elementwise(ln_bias).iter().all(|&v| v == 0.0));

        let mut mm = m.clone();
        apply_all_layers(&mut mm, &all).unwrap();
        remove_all_layers(&mut mm, &all).unwrap();
        for (p, q) in mm.params().iter().zip(m.params()) {
            assert!(p.tensor.bit_eq(&q.tensor), "{}", p.name);
        }
    }

    #[test]
    fn elementwise_std_tracks_magnitude() {
        let p: f64 = -0.7;
        let r = ElementwiseRecord { param: "x".into(), seed_label: RngStream::new(2), sigma: 0.2, magnitudes: vec![p.abs(); 100_000] };
        let eps = sample_elementwise(&r);
        let std = (eps.iter().map(|v| v * v).sum::<f64>() / eps.len() as f64).sqrt();
        assert!((std / (0.2 * 0.7) - 1.0).abs() < 0.03);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = SigmaSchedule::new(0.1, 100, ScheduleKind::CosineIncrease).unwrap();
        assert_eq!(s.sigma_at(0).unwrap(), 0.0);
        assert_eq!(s.sigma_at(100).unwrap(), 0.1);
        assert!((s.sigma_at(50).unwrap() - 0.05).abs() < 1e-15);
        assert!(matches!(s.sigma_at(101), Err(Error::Contract(_))));
        let c = SigmaSchedule::new(0.1, 100, ScheduleKind::Constant).unwrap();
        assert_eq!(c.sigma_at(0).unwrap(), 0.1);
    }

    proptest! {
        #[test]
        fn cosine_schedule_is_bounded_and_monotone(sigma in 0.0f64..1.0, total in 1usize..500) {
            let s = SigmaSchedule::new(sigma, total, ScheduleKind::CosineIncrease).unwrap();
            let mut prev = 0.0;
            for t in 0..=total {
                let v = s.sigma_at(t).unwrap();
                prop_assert!(v >= prev && v >= 0.0 && v <= sigma);
                prev = v;
            }
        }

        #[test]
        fn replay_restores_any_layer(seed in any::<u64>(), sigma in 0.0f64..0.5, step in 0u64..1000) {
            let mut m = build_model(&ModelSpec::mlp(vec![4, 7, 3]), seed % 97).unwrap();
            let before = m.clone();
            let records = sample_layers(&m, sigma, seed, step, 0);
            apply_perturbation(&mut m, &records).unwrap();
            remove_perturbation(&mut m, &records).unwrap();
            for (p, q) in m.params().iter().zip(before.params()) {
                prop_assert!(p.tensor.bit_eq(&q.tensor));
            }
        }
    }
}
