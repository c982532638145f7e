//! Experiment configuration.
//!
//! Configs are JSON objects. Every field except `method` and `dataset` has
//! a default. Unknown keys anywhere in the document are rejected together,
//! each reported by its dotted path.
//!
//! ```json
//! {
//!   "name": "blobs",
//!   "method": "flat_lora",            // lora | flat_lora | sam_full | lora_sam | full_ft
//!   "dataset": { "kind": "gaussian_blobs", "size": 2000, "noise": 1.0 },
//!   "model": { "architecture": "mlp", "widths": [2, 64, 64, 2], "rank": 4, "alpha": 8.0 },
//!   "sigma": 0.05,                    // flat_lora only
//!   "schedule": "cosine_increase",    // or "constant"
//!   "rho": null,                      // sam_full / lora_sam only
//!   "optimizer": { "kind": "adamw", "lr": 0.001, "weight_decay": 0.01 },
//!   "steps": 500,
//!   "seeds": [0, 1, 2]
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelSpec};
use crate::optim::OptimConfig;
use crate::perturb::{ScheduleKind, SigmaSchedule};
use crate::trainers::analysis::RatioNorm;
use crate::trainers::{FlatConfig, Method, MethodConfig, SamConfig};

pub const DEFAULT_SIGMA: f64 = 0.05;
/// Radius for perturbing the full weight space.
pub const DEFAULT_RHO_FULL: f64 = 0.05;
/// Radius for perturbing the adapter factors.
pub const DEFAULT_RHO_ADAPTER: f64 = 0.003;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SharpnessConfig {
    pub radius: f64,
    pub samples: usize,
    /// Evaluate on the first `subset` training rows instead of all of them.
    pub subset: Option<usize>,
}

impl Default for SharpnessConfig {
    fn default() -> Self {
        Self { radius: 0.1, samples: 8, subset: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub method: Method,
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub schedule: ScheduleKind,
    #[serde(default = "one")]
    pub flat_samples: usize,
    #[serde(default = "one")]
    pub norm_refresh: usize,
    #[serde(default)]
    pub all_layers: bool,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub sam_per_layer: bool,
    #[serde(default = "yes")]
    pub track_ratio: bool,
    #[serde(default)]
    pub ratio_norm: RatioNorm,
    #[serde(default)]
    pub optimizer: OptimConfig,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// `None` trains on the full training split every step.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub sharpness: SharpnessConfig,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default = "yes")]
    pub save_checkpoints: bool,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_model() -> ModelSpec {
    ModelSpec::mlp(vec![2, 64, 64, 2])
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_steps() -> usize {
    500
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_eval_every() -> usize {
    50
}

impl ExperimentConfig {
    /// Defaults for everything but the method and the dataset.
    pub fn new(method: Method, dataset: DatasetSpec) -> Self {
        Self {
            name: default_name(),
            method,
            model: default_model(),
            dataset,
            sigma: None,
            schedule: ScheduleKind::default(),
            flat_samples: 1,
            norm_refresh: 1,
            all_layers: false,
            rho: None,
            sam_per_layer: false,
            track_ratio: true,
            ratio_norm: RatioNorm::default(),
            optimizer: OptimConfig::default(),
            steps: default_steps(),
            batch_size: None,
            seeds: default_seeds(),
            eval_every: default_eval_every(),
            sharpness: SharpnessConfig::default(),
            output_dir: None,
            save_checkpoints: true,
        }
    }

    /// Fills method-dependent defaults (`sigma`, `rho`) and checks every field.
    pub fn resolve(mut self) -> Result<Self> {
        match self.method {
            Method::FlatLora => {
                self.sigma.get_or_insert(DEFAULT_SIGMA);
            }
            Method::SamFull => {
                self.rho.get_or_insert(DEFAULT_RHO_FULL);
            }
            Method::LoraSam => {
                self.rho.get_or_insert(DEFAULT_RHO_ADAPTER);
            }
            Method::Lora | Method::FullFt => {}
        }
        self.model.full_finetune = self.method == Method::FullFt;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let mut keys: Vec<String> = Vec::new();
        let mut messages: Vec<String> = Vec::new();
        let mut fail = |k: &str, m: &str| {
            keys.push(k.to_string());
            messages.push(m.to_string());
        };
        if self.sigma.is_some() && !self.method.uses_sigma() {
            fail("sigma", &format!("sigma does not apply to method {}", self.method));
        }
        if self.rho.is_some() && !self.method.uses_rho() {
            fail("rho", &format!("rho does not apply to method {}", self.method));
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0) || !s.is_finite() {
                fail("sigma", "sigma must be finite and nonnegative");
            }
        }
        if let Some(r) = self.rho {
            if !(r > 0.0) || !r.is_finite() {
                fail("rho", "rho must be positive");
            }
        }
        if self.seeds.is_empty() {
            fail("seeds", "at least one seed is required");
        }
        if self.steps == 0 {
            fail("steps", "steps must be positive");
        }
        if self.eval_every == 0 {
            fail("eval_every", "eval_every must be positive");
        }
        if self.flat_samples == 0 {
            fail("flat_samples", "flat_samples must be positive");
        }
        if self.norm_refresh == 0 {
            fail("norm_refresh", "norm_refresh must be positive");
        }
        if self.batch_size == Some(0) {
            fail("batch_size", "batch_size must be positive");
        }
        if self.sharpness.samples == 0 || !(self.sharpness.radius >= 0.0) {
            fail("sharpness", "sharpness needs samples >= 1 and radius >= 0");
        }
        for (prefix, r) in [("model.", self.model.validate()), ("", self.dataset.validate()), ("", self.optimizer.validate())] {
            if let Err(Error::Config { message, keys: ks }) = r {
                for k in ks {
                    fail(&format!("{prefix}{k}"), &message);
                }
            }
        }
        match (self.model.architecture, self.dataset.kind) {
            (Architecture::Mlp, DatasetKind::TokenSequenceParity)
            | (Architecture::TinyTransformer, DatasetKind::GaussianBlobs | DatasetKind::TwoSpirals) => {
                fail("model.architecture", "architecture does not match the dataset's input type");
            }
            (Architecture::Mlp, _) => {
                let w = &self.model.widths;
                if w.first() != Some(&self.dataset.input_dim) || w.last() != Some(&self.dataset.classes) {
                    fail("model.widths", "mlp widths must start at dataset.input_dim and end at dataset.classes");
                }
            }
            (Architecture::TinyTransformer, DatasetKind::TokenSequenceParity) => {
                let t = &self.model.transformer;
                if t.vocab != self.dataset.vocab || t.seq_len != self.dataset.seq_len || t.classes != self.dataset.classes {
                    fail("model.transformer", "transformer vocab/seq_len/classes must match the dataset");
                }
            }
        }
        if keys.is_empty() {
            Ok(())
        } else {
            keys.dedup();
            Err(Error::Config { message: messages.join("; "), keys })
        }
    }

    /// Trainer settings for this config. Call on a resolved config.
    pub fn method_config(&self) -> Result<MethodConfig> {
        let sam = || -> Result<SamConfig> {
            let rho = self.rho.ok_or_else(|| Error::config("rho is not set", &["rho"]))?;
            Ok(SamConfig { per_layer: self.sam_per_layer, ..SamConfig::new(rho)? })
        };
        Ok(match self.method {
            Method::Lora => MethodConfig::Lora,
            Method::FullFt => MethodConfig::FullFt,
            Method::FlatLora => {
                let sigma = self.sigma.ok_or_else(|| Error::config("sigma is not set", &["sigma"]))?;
                let schedule = SigmaSchedule::new(sigma, self.steps, self.schedule)?;
                MethodConfig::FlatLora(FlatConfig {
                    schedule,
                    samples: self.flat_samples,
                    norm_refresh: self.norm_refresh,
                    all_layers: self.all_layers,
                })
            }
            Method::SamFull => MethodConfig::SamFull(sam()?),
            Method::LoraSam => MethodConfig::LoraSam { sam: sam()?, ratio: self.track_ratio.then_some(self.ratio_norm) },
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Every key path present in `input` but absent from `known`.
fn unknown_keys(input: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(i), Value::Object(k)) = (input, known) else { return };
    for (key, v) in i {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match k.get(key) {
            None => out.push(path),
            Some(kv) => unknown_keys(v, kv, &path, out),
        }
    }
}

/// Parses, defaults and validates a JSON config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text)?;
    let template = serde_json::to_value(ExperimentConfig::new(Method::Lora, DatasetSpec::default()))?;
    let mut unknown = Vec::new();
    unknown_keys(&value, &template, "", &mut unknown);
    if !unknown.is_empty() {
        let keys: Vec<&str> = unknown.iter().map(String::as_str).collect();
        return Err(Error::config(format!("unknown fields {unknown:?}"), &keys));
    }
    let missing: Vec<&str> = ["method", "dataset"].into_iter().filter(|k| value.get(k).is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::config("missing required fields", &missing));
    }
    let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::config(format!("invalid config: {e}"), &[]))?;
    cfg.resolve()
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_is_fully_defaulted() {
        let cfg = parse_config(r#"{"method": "flat_lora", "dataset": {"kind": "gaussian_blobs"}}"#).unwrap();
        assert_eq!(cfg.sigma, Some(DEFAULT_SIGMA));
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.steps, 500);
        assert_eq!(cfg.model.widths, vec![2, 64, 64, 2]);
        assert_eq!(cfg.model.rank, 4);
        assert_eq!(cfg.dataset.size, 2000);
        assert_eq!(cfg.optimizer, OptimConfig::default());
        assert!(matches!(cfg.method_config().unwrap(), MethodConfig::FlatLora(_)));
    }

    #[test]
    fn rho_defaults_depend_on_the_space() {
        let full = parse_config(r#"{"method": "sam_full", "dataset": {}}"#).unwrap();
        let ab = parse_config(r#"{"method": "lora_sam", "dataset": {}}"#).unwrap();
        assert_eq!(full.rho, Some(0.05));
        assert_eq!(ab.rho, Some(0.003));
        assert_eq!(full.sigma, None);
    }

    #[test]
    fn sigma_with_sam_is_rejected() {
        match parse_config(r#"{"method": "sam_full", "dataset": {}, "sigma": 0.1}"#) {
            Err(Error::Config { keys, .. }) => assert_eq!(keys, vec!["sigma"]),
            other => panic!("{other:?}"),
        }
        match parse_config(r#"{"method": "lora", "dataset": {}, "sigma": 0.1, "rho": 0.1}"#) {
            Err(Error::Config { keys, .. }) => assert_eq!(keys, vec!["sigma", "rho"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_unknown_keys_are_listed() {
        let text = r#"{"method": "lora", "dataset": {"sizee": 3}, "lr": 1, "model": {"architecture": "mlp", "depth": 2}}"#;
        match parse_config(text) {
            Err(Error::Config { keys, .. }) => {
                let mut keys = keys;
                keys.sort();
                assert_eq!(keys, vec!["dataset.sizee", "lr", "model.depth"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = parse_config(r#"{"method": "lora_sam", "dataset": {"kind": "two_spirals", "noise": 0.1}, "seeds": [4]}"#).unwrap();
        let back = parse_config(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn shape_mismatch_names_the_model_key() {
        let text = r#"{"method": "lora", "dataset": {"classes": 3}}"#;
        match parse_config(text) {
            Err(Error::Config { keys, .. }) => assert_eq!(keys, vec!["model.widths"]),
            other => panic!("{other:?}"),
        }
        let text = r#"{"method": "lora", "dataset": {"kind": "token_sequence_parity"}, "model": {"architecture": "tiny_transformer"}}"#;
        assert!(parse_config(text).is_ok());
    }

    #[test]
    fn missing_method_is_reported() {
        match parse_config(r#"{"dataset": {}}"#) {
            Err(Error::Config { keys, .. }) => assert_eq!(keys, vec!["method"]),
            other => panic!("{other:?}"),
        }
    }
}
