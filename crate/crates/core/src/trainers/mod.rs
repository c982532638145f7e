//! Training procedures.
//!
//! Every step leaves the frozen weights exactly as it found them. Gradient
//! evaluations (forward plus backward) are counted per step: one for plain
//! `lora` and `flat_lora` with a single noise sample, two for both SAM variants.

pub mod analysis;
pub mod toy;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Model, ParamId};
use crate::optim::{OptimConfig, OptimState};
use crate::perturb::{
    apply_all_layers, apply_perturbation, remove_all_layers, remove_perturbation, sample_all_layers, sample_layers, PerturbationRecord,
    SigmaSchedule,
};
use crate::tensor::Tensor;

use analysis::{ratio_from_terms, RatioNorm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lora,
    FlatLora,
    SamFull,
    LoraSam,
    FullFt,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Lora, Method::FlatLora, Method::SamFull, Method::LoraSam, Method::FullFt];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::FlatLora => "flat_lora",
            Method::SamFull => "sam_full",
            Method::LoraSam => "lora_sam",
            Method::FullFt => "full_ft",
        }
    }

    pub fn uses_sigma(self) -> bool {
        self == Method::FlatLora
    }

    pub fn uses_rho(self) -> bool {
        matches!(self, Method::SamFull | Method::LoraSam)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub rho: f64,
    /// Normalize each layer's perturbation separately instead of one global norm.
    pub per_layer: bool,
}

impl SamConfig {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::Contract(format!("rho must be positive, got {rho}")));
        }
        Ok(Self { rho, per_layer: false })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatConfig {
    pub schedule: SigmaSchedule,
    /// Noise draws averaged per step.
    pub samples: usize,
    /// Recompute filter norms every this many steps.
    pub norm_refresh: usize,
    /// Also perturb frozen non-linear parameters and unadapted linear layers.
    pub all_layers: bool,
}

impl FlatConfig {
    pub fn new(schedule: SigmaSchedule) -> Self {
        Self { schedule, samples: 1, norm_refresh: 1, all_layers: false }
    }
}

/// `flat_lora` trainer state: configuration, run seed, and cached norms.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatLora {
    pub config: FlatConfig,
    pub seed: u64,
    cached_norms: BTreeMap<String, Vec<f64>>,
    cached_at: Option<usize>,
}

impl FlatLora {
    pub fn new(config: FlatConfig, seed: u64) -> Result<Self> {
        if config.samples == 0 || config.norm_refresh == 0 {
            return Err(Error::Contract("samples and norm_refresh must be positive".into()));
        }
        Ok(Self { config, seed, cached_norms: BTreeMap::new(), cached_at: None })
    }

    fn records(&mut self, model: &Model, sigma: f64, t: usize, sample: usize) -> Vec<PerturbationRecord> {
        let mut recs = sample_layers(model, sigma, self.seed, t as u64, sample as u64);
        if self.config.norm_refresh == 1 || sigma == 0.0 {
            return recs;
        }
        let stale = self.cached_at.is_none_or(|at| t >= at + self.config.norm_refresh);
        if stale {
            self.cached_norms = recs.iter().map(|r| (r.layer_id.clone(), r.filter_norms.clone())).collect();
            self.cached_at = Some(t);
        } else {
            for r in &mut recs {
                if let Some(n) = self.cached_norms.get(&r.layer_id) {
                    r.filter_norms.clone_from(n);
                }
            }
        }
        recs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRatio {
    pub layer: String,
    pub value: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub method: Method,
    pub clean_loss: f64,
    pub perturbed_loss: f64,
    pub sigma: Option<f64>,
    pub rho: Option<f64>,
    /// Norm of the applied perturbation (SAM variants).
    pub perturbation_norm: Option<f64>,
    pub ratios: Option<Vec<LayerRatio>>,
    /// Euclidean norm of the gradient used for the update.
    pub grad_norm: f64,
    pub lr: f64,
    pub grad_evals: usize,
    /// Floats the method holds beyond the model while perturbed.
    pub extra_floats: usize,
    /// Seed labels kept alongside `extra_floats`.
    pub seed_labels: usize,
    /// The SAM gradient vanished and no perturbation was applied.
    pub degenerate: bool,
}

impl StepReport {
    fn plain(step: usize, method: Method, loss: f64, grad_norm: f64, lr: f64) -> Self {
        Self {
            step,
            method,
            clean_loss: loss,
            perturbed_loss: loss,
            sigma: None,
            rho: None,
            perturbation_norm: None,
            ratios: None,
            grad_norm,
            lr,
            grad_evals: 1,
            extra_floats: 0,
            seed_labels: 0,
            degenerate: false,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.clean_loss.is_finite()
            && self.perturbed_loss.is_finite()
            && self.grad_norm.is_finite()
            && self.ratios.as_ref().is_none_or(|rs| rs.iter().all(|r| r.value.is_finite()))
    }
}

fn finite(step: usize, value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { step, detail: format!("{what} = {value}") })
    }
}

/// Euclidean norm over the gradients of all trainable parameters.
pub fn trainable_grad_norm(model: &Model) -> f64 {
    model
        .trainable_ids()
        .into_iter()
        .filter_map(|id| model.param(id).tensor.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn update(model: &mut Model, opt: &mut OptimState, step: usize) -> Result<(f64, f64)> {
    let gn = finite(step, trainable_grad_norm(model), "gradient norm")?;
    let lr = opt.current_lr();
    opt.step(model)?;
    Ok((gn, lr))
}

/// One clean forward/backward and an optimizer update.
pub fn lora_step(model: &mut Model, batch: &Batch, opt: &mut OptimState, t: usize) -> Result<StepReport> {
    model.zero_grad();
    let loss = finite(t, model.accumulate_gradients(batch)?, "loss")?;
    let (gn, lr) = update(model, opt, t)?;
    Ok(StepReport::plain(t, Method::Lora, loss, gn, lr))
}

/// Gradient of `L(W + sBA + eps)` with `eps` drawn per adapted layer at the
/// scheduled strength; the perturbation is removed before the update.
pub fn flat_lora_step(model: &mut Model, batch: &Batch, opt: &mut OptimState, flat: &mut FlatLora, t: usize) -> Result<StepReport> {
    let sigma = flat.config.schedule.sigma_at(t)?;
    model.zero_grad();
    let clean = if sigma == 0.0 { None } else { Some(finite(t, model.loss(batch)?, "clean loss")?) };
    let draws = flat.config.samples;
    let mut total = 0.0;
    let (mut extra, mut seeds) = (0, 0);
    for k in 0..draws {
        let loss = if flat.config.all_layers {
            let recs = sample_all_layers(model, sigma, flat.seed, t as u64, k as u64);
            apply_all_layers(model, &recs)?;
            let loss = model.accumulate_gradients(batch);
            remove_all_layers(model, &recs)?;
            extra = recs.persistent_floats();
            seeds = recs.filters.len() + recs.elementwise.len();
            loss?
        } else {
            let recs = flat.records(model, sigma, t, k);
            apply_perturbation(model, &recs)?;
            let loss = model.accumulate_gradients(batch);
            remove_perturbation(model, &recs)?;
            extra = recs.iter().map(PerturbationRecord::persistent_floats).sum();
            seeds = recs.len();
            loss?
        };
        total += finite(t, loss, &format!("perturbed loss at sigma {sigma}"))?;
    }
    if draws > 1 {
        let inv = 1.0 / draws as f64;
        for id in model.trainable_ids() {
            if let Some(g) = model.param_mut(id).tensor.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= inv);
            }
        }
    }
    let perturbed = total / draws as f64;
    let (gn, lr) = update(model, opt, t)?;
    Ok(StepReport {
        method: Method::FlatLora,
        clean_loss: clean.unwrap_or(perturbed),
        perturbed_loss: perturbed,
        sigma: Some(sigma),
        grad_evals: draws,
        extra_floats: extra,
        seed_labels: seeds,
        ..StepReport::plain(t, Method::FlatLora, perturbed, gn, lr)
    })
}

/// Result of the two SAM gradient evaluations; gradients are left in the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SamOutcome {
    pub clean_loss: f64,
    pub perturbed_loss: f64,
    pub perturbation_norm: f64,
    pub degenerate: bool,
    /// Per adapted site: the applied perturbation(s).
    pub perturbations: Vec<SitePerturbation>,
    pub extra_floats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SitePerturbation {
    pub site: usize,
    /// `eps_W` for full-space SAM, `eps_A` for adapter SAM.
    pub first: Tensor,
    /// `eps_B` for adapter SAM.
    pub second: Option<Tensor>,
}

fn scale_for(norms: &[f64], rho: f64, per_layer: bool) -> Vec<f64> {
    let global = norms.iter().map(|n| n * n).sum::<f64>().sqrt();
    norms
        .iter()
        .map(|&n| {
            let d = if per_layer { n } else { global };
            if d > 0.0 {
                rho / d
            } else {
                0.0
            }
        })
        .collect()
}

/// Full-space SAM gradients: `eps_W = rho g / |g|` with `g = dL/dW'` over all adapted layers.
pub fn sam_full_gradients(model: &mut Model, batch: &Batch, cfg: &SamConfig, t: usize) -> Result<SamOutcome> {
    let sites = model.adapted_sites();
    let (clean, grads) = model.merged_gradients(batch)?;
    let clean = finite(t, clean, "clean loss")?;
    let g: Vec<Tensor> = sites.iter().map(|&s| grads[s].clone().expect("adapted site has a merged gradient")).collect();
    let norms: Vec<f64> = g.iter().map(Tensor::frobenius).collect();
    finite(t, norms.iter().sum(), "merged gradient norm")?;
    let scales = scale_for(&norms, cfg.rho, cfg.per_layer);
    let degenerate = scales.iter().all(|&c| c == 0.0);

    model.zero_grad();
    let mut backups: Vec<(ParamId, Tensor)> = Vec::with_capacity(sites.len());
    let mut perturbations = Vec::with_capacity(sites.len());
    let mut norm_sq = 0.0;
    let mut extra = 0;
    for ((&site, gl), &c) in sites.iter().zip(&g).zip(&scales) {
        let wid = model.linears()[site].weight;
        let eps = gl.scale(c);
        norm_sq += eps.frobenius_sq();
        let w = model.param(wid).tensor.clone();
        extra += eps.len() + w.len();
        let shifted = w.add(&eps)?.with_grad(false);
        backups.push((wid, w));
        model.param_mut(wid).tensor = shifted;
        perturbations.push(SitePerturbation { site, first: eps, second: None });
    }
    let perturbed = model.accumulate_gradients(batch);
    for (wid, w) in backups {
        model.param_mut(wid).tensor = w;
    }
    let perturbed = finite(t, perturbed?, "perturbed loss")?;
    Ok(SamOutcome {
        clean_loss: clean,
        perturbed_loss: perturbed,
        perturbation_norm: norm_sq.sqrt(),
        degenerate,
        perturbations,
        extra_floats: extra,
    })
}

pub fn sam_step_full(model: &mut Model, batch: &Batch, opt: &mut OptimState, cfg: &SamConfig, t: usize) -> Result<StepReport> {
    let out = sam_full_gradients(model, batch, cfg, t)?;
    let (gn, lr) = update(model, opt, t)?;
    Ok(StepReport {
        clean_loss: out.clean_loss,
        perturbed_loss: out.perturbed_loss,
        rho: Some(cfg.rho),
        perturbation_norm: Some(out.perturbation_norm),
        grad_evals: 2,
        extra_floats: out.extra_floats,
        degenerate: out.degenerate,
        ..StepReport::plain(t, Method::SamFull, out.clean_loss, gn, lr)
    })
}

/// Adapter-space SAM gradients: `(eps_A, eps_B) = rho (dA, dB) / |(dA, dB)|`
/// with the joint norm taken over every adapter of the model. Returns the
/// outcome and, when `ratio` is set, each layer's ratio statistic.
pub fn lora_sam_gradients(
    model: &mut Model,
    batch: &Batch,
    cfg: &SamConfig,
    t: usize,
    ratio: Option<RatioNorm>,
) -> Result<(SamOutcome, Option<Vec<LayerRatio>>)> {
    let sites = model.adapted_sites();
    model.zero_grad();
    let clean = finite(t, model.accumulate_gradients(batch)?, "clean loss")?;
    let ids: Vec<(ParamId, ParamId)> = sites
        .iter()
        .map(|&s| {
            let ad = model.linears()[s].adapter.as_ref().expect("adapted");
            (ad.a, ad.b)
        })
        .collect();
    let grad_of = |model: &Model, id: ParamId| -> Tensor {
        let p = &model.param(id).tensor;
        let g = p.grad.clone().unwrap_or_else(|| vec![0.0; p.len()]);
        Tensor::new(p.shape().to_vec(), g).expect("gradient matches its parameter")
    };
    let grads: Vec<(Tensor, Tensor)> = ids.iter().map(|&(a, b)| (grad_of(model, a), grad_of(model, b))).collect();
    let norms: Vec<f64> = grads.iter().map(|(ga, gb)| (ga.frobenius_sq() + gb.frobenius_sq()).sqrt()).collect();
    finite(t, norms.iter().sum(), "adapter gradient norm")?;
    let scales = scale_for(&norms, cfg.rho, cfg.per_layer);
    let degenerate = scales.iter().all(|&c| c == 0.0);

    model.zero_grad();
    let mut backups = Vec::with_capacity(2 * ids.len());
    let mut perturbations = Vec::with_capacity(ids.len());
    let mut ratios = ratio.map(|_| Vec::with_capacity(ids.len()));
    let (mut norm_sq, mut extra) = (0.0, 0);
    for (((&site, &(aid, bid)), (ga, gb)), &c) in sites.iter().zip(&ids).zip(&grads).zip(&scales) {
        let eps_a = ga.scale(c);
        let eps_b = gb.scale(c);
        norm_sq += eps_a.frobenius_sq() + eps_b.frobenius_sq();
        let a = model.param(aid).tensor.clone();
        let b = model.param(bid).tensor.clone();
        extra += eps_a.len() + eps_b.len() + a.len() + b.len();
        if let (Some(rs), Some(norm)) = (ratios.as_mut(), ratio) {
            let r = ratio_from_terms(&a, &b, &eps_a, &eps_b, norm)?;
            rs.push(LayerRatio { layer: model.linears()[site].id.clone(), value: r.value, degenerate: r.degenerate });
        }
        model.param_mut(aid).tensor = a.add(&eps_a)?.with_grad(true);
        model.param_mut(bid).tensor = b.add(&eps_b)?.with_grad(true);
        backups.push((aid, a));
        backups.push((bid, b));
        perturbations.push(SitePerturbation { site, first: eps_a, second: Some(eps_b) });
    }
    let perturbed = model.accumulate_gradients(batch);
    for (id, clean_value) in backups {
        let grad = model.param_mut(id).tensor.grad.take();
        let p = &mut model.param_mut(id).tensor;
        *p = clean_value;
        p.grad = grad;
    }
    let perturbed = finite(t, perturbed?, "perturbed loss")?;
    let outcome = SamOutcome {
        clean_loss: clean,
        perturbed_loss: perturbed,
        perturbation_norm: norm_sq.sqrt(),
        degenerate,
        perturbations,
        extra_floats: extra,
    };
    Ok((outcome, ratios))
}

pub fn lora_sam_step(
    model: &mut Model,
    batch: &Batch,
    opt: &mut OptimState,
    cfg: &SamConfig,
    t: usize,
    ratio: Option<RatioNorm>,
) -> Result<StepReport> {
    let (out, ratios) = lora_sam_gradients(model, batch, cfg, t, ratio)?;
    let (gn, lr) = update(model, opt, t)?;
    Ok(StepReport {
        clean_loss: out.clean_loss,
        perturbed_loss: out.perturbed_loss,
        rho: Some(cfg.rho),
        perturbation_norm: Some(out.perturbation_norm),
        ratios,
        grad_evals: 2,
        extra_floats: out.extra_floats,
        degenerate: out.degenerate,
        ..StepReport::plain(t, Method::LoraSam, out.clean_loss, gn, lr)
    })
}

/// Method-specific settings for a [`Trainer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MethodConfig {
    Lora,
    FlatLora(FlatConfig),
    SamFull(SamConfig),
    LoraSam { sam: SamConfig, ratio: Option<RatioNorm> },
    FullFt,
}

impl MethodConfig {
    pub fn method(&self) -> Method {
        match self {
            MethodConfig::Lora => Method::Lora,
            MethodConfig::FlatLora(_) => Method::FlatLora,
            MethodConfig::SamFull(_) => Method::SamFull,
            MethodConfig::LoraSam { .. } => Method::LoraSam,
            MethodConfig::FullFt => Method::FullFt,
        }
    }
}

/// Owns the optimizer and method state for one model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub method: MethodConfig,
    pub opt: OptimState,
    flat: Option<FlatLora>,
    /// Gradient evaluations over the trainer's lifetime.
    pub grad_evals: usize,
}

impl Trainer {
    pub fn new(method: MethodConfig, model: &Model, opt: OptimConfig, total_steps: usize, seed: u64) -> Result<Self> {
        let full = model.spec().full_finetune;
        match method {
            MethodConfig::FullFt if !full => {
                return Err(Error::config("full_ft needs a model built with full_finetune", &["method"]));
            }
            MethodConfig::FullFt => {}
            _ if model.adapted_sites().is_empty() => {
                return Err(Error::config("method needs at least one adapted layer", &["model.lora_targets"]));
            }
            _ => {}
        }
        let flat = match method {
            MethodConfig::FlatLora(cfg) => Some(FlatLora::new(cfg, seed)?),
            _ => None,
        };
        Ok(Self { method, opt: OptimState::new(opt, model, total_steps)?, flat, grad_evals: 0 })
    }

    pub fn step(&mut self, model: &mut Model, batch: &Batch, t: usize) -> Result<StepReport> {
        let report = match self.method {
            MethodConfig::Lora => lora_step(model, batch, &mut self.opt, t)?,
            MethodConfig::FullFt => StepReport { method: Method::FullFt, ..lora_step(model, batch, &mut self.opt, t)? },
            MethodConfig::FlatLora(_) => {
                let flat = self.flat.as_mut().expect("flat state exists for flat_lora");
                flat_lora_step(model, batch, &mut self.opt, flat, t)?
            }
            MethodConfig::SamFull(cfg) => sam_step_full(model, batch, &mut self.opt, &cfg, t)?,
            MethodConfig::LoraSam { sam, ratio } => lora_sam_step(model, batch, &mut self.opt, &sam, t, ratio)?,
        };
        if !report.is_finite() {
            return Err(Error::NonFinite { step: t, detail: format!("{report:?}") });
        }
        self.grad_evals += report.grad_evals;
        Ok(report)
    }
}
