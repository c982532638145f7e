//! Multi-seed runs and parameter sweeps.
//!
//! Output layout under the output root:
//!
//! ```text
//! results.csv                       appended, one row per (config, seed)
//! <name>/seed-<k>/steps.jsonl       one step report per line
//! <name>/seed-<k>/evals.jsonl       train/test evaluations
//! <name>/seed-<k>/config.json
//! <name>/seed-<k>/model.ckpt
//! <name>/sweep-<param>.csv          aggregates, sweeps only
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{make_dataset, select, Batcher, DatasetSpec};
use crate::error::{Error, Result};
use crate::landscape::{
    filter_normalized_direction, generalization_gap, loss_surface, sharpness_metric, Direction, EvalPoint, LandscapeGrid, LossProbe,
    ModelProbe,
};
use crate::model::{build_model, checkpoint, Model};
use crate::perturb::remove_perturbation;
use crate::rng::RngStream;
use crate::trainers::{Method, StepReport, Trainer};

/// Environment variable overriding the output root.
pub const OUTPUT_ENV: &str = "FLATLORA_OUTPUT";

pub fn output_root(config: &ExperimentConfig) -> PathBuf {
    std::env::var_os(OUTPUT_ENV)
        .map(PathBuf::from)
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Final metrics of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub name: String,
    pub method: Method,
    pub seed: u64,
    pub sigma: Option<f64>,
    pub rho: Option<f64>,
    pub rank: usize,
    pub status: RunStatus,
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub sharpness: Option<f64>,
    /// Train minus test accuracy at the final evaluation.
    pub accuracy_gap: Option<f64>,
    /// Test minus train loss at the final evaluation.
    pub loss_gap: Option<f64>,
    pub grad_evals: usize,
    /// Peak floats held by the method beyond the model and optimizer.
    pub extra_floats: usize,
    pub seed_labels: usize,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

impl ResultRow {
    fn failed(config: &ExperimentConfig, seed: u64, error: String, wall_time_s: f64) -> Self {
        Self {
            name: config.name.clone(),
            method: config.method,
            seed,
            sigma: config.sigma,
            rho: config.rho,
            rank: config.model.rank,
            status: RunStatus::Failed,
            train_loss: None,
            test_loss: None,
            train_accuracy: None,
            test_accuracy: None,
            sharpness: None,
            accuracy_gap: None,
            loss_gap: None,
            grad_evals: 0,
            extra_floats: 0,
            seed_labels: 0,
            wall_time_s,
            error: Some(error),
        }
    }

    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self { wall_time_s: 0.0, ..self.clone() } == Self { wall_time_s: 0.0, ..other.clone() }
    }
}

/// Everything one training run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub row: ResultRow,
    pub reports: Vec<StepReport>,
    pub train_curve: Vec<EvalPoint>,
    pub test_curve: Vec<EvalPoint>,
    pub model: Model,
}

/// Per-step callback; an error aborts the run.
pub type StepLog<'a> = &'a mut dyn FnMut(&StepReport) -> Result<()>;

/// Trains one seed in memory. `log` receives each step report as it is produced.
pub fn train_run(config: &ExperimentConfig, seed: u64, mut log: Option<StepLog<'_>>) -> Result<RunOutcome> {
    let start = Instant::now();
    let data = make_dataset(&config.dataset, seed)?;
    let mut model = build_model(&config.model, seed)?;
    let mut trainer = Trainer::new(config.method_config()?, &model, config.optimizer, config.steps, seed)?;
    let mut batcher = Batcher::new(data.train.len(), config.batch_size, seed);
    let full_batch = config.batch_size.is_none_or(|b| b >= data.train.len());

    let mut reports = Vec::with_capacity(config.steps);
    let mut train_curve = Vec::new();
    let mut test_curve = Vec::new();
    for t in 0..config.steps {
        let report = if full_batch {
            trainer.step(&mut model, &data.train, t)?
        } else {
            trainer.step(&mut model, &select(&data.train, &batcher.next_indices()), t)?
        };
        if let Some(log) = log.as_mut() {
            log(&report)?;
        }
        reports.push(report);
        if (t + 1) % config.eval_every == 0 || t + 1 == config.steps {
            for (batch, curve) in [(&data.train, &mut train_curve), (&data.test, &mut test_curve)] {
                let m = model.evaluate(batch)?;
                curve.push(EvalPoint { step: t + 1, loss: m.loss, accuracy: m.accuracy });
            }
        }
    }

    let sharp_batch = match config.sharpness.subset {
        Some(k) if k < data.train.len() => select(&data.train, &(0..k).collect::<Vec<_>>()),
        _ => data.train.clone(),
    };
    let probe = ModelProbe::new(&model, sharp_batch);
    let label = RngStream::new(seed).derive_str("sharpness");
    let sharpness = sharpness_metric(&probe, config.sharpness.radius, config.sharpness.samples, label)?;
    let gap = generalization_gap(&train_curve, &test_curve)?;
    let last_gap = gap.last();
    let (last_train, last_test) = (train_curve.last(), test_curve.last());

    let row = ResultRow {
        name: config.name.clone(),
        method: config.method,
        seed,
        sigma: config.sigma,
        rho: config.rho,
        rank: config.model.rank,
        status: RunStatus::Ok,
        train_loss: last_train.map(|p| p.loss),
        test_loss: last_test.map(|p| p.loss),
        train_accuracy: last_train.and_then(|p| p.accuracy),
        test_accuracy: last_test.and_then(|p| p.accuracy),
        sharpness: Some(sharpness),
        accuracy_gap: last_gap.and_then(|g| g.accuracy_gap),
        loss_gap: last_gap.map(|g| g.loss_gap),
        grad_evals: trainer.grad_evals,
        extra_floats: reports.iter().map(|r| r.extra_floats).max().unwrap_or(0),
        seed_labels: reports.iter().map(|r| r.seed_labels).max().unwrap_or(0),
        wall_time_s: start.elapsed().as_secs_f64(),
        error: None,
    };
    Ok(RunOutcome { row, reports, train_curve, test_curve, model })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// One seed with logs and checkpoint under `dir`. Failures become a failed row.
fn run_seed(config: &ExperimentConfig, seed: u64, dir: &Path) -> ResultRow {
    let start = Instant::now();
    let attempt = || -> Result<ResultRow> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), config.to_json()?)?;
        let mut steps = BufWriter::new(File::create(dir.join("steps.jsonl"))?);
        let mut log = |r: &StepReport| -> Result<()> {
            serde_json::to_writer(&mut steps, r)?;
            steps.write_all(b"\n")?;
            Ok(())
        };
        let outcome = train_run(config, seed, Some(&mut log));
        steps.flush()?;
        let outcome = outcome?;
        let evals: Vec<_> = outcome.train_curve.iter().zip(&outcome.test_curve).collect();
        write_jsonl(&dir.join("evals.jsonl"), &evals)?;
        if config.save_checkpoints {
            let dataset = serde_json::to_value(&config.dataset)?;
            checkpoint::save(&outcome.model, Some(dataset), &dir.join("model.ckpt"))?;
        }
        Ok(outcome.row)
    };
    attempt().unwrap_or_else(|e| ResultRow::failed(config, seed, e.to_string(), start.elapsed().as_secs_f64()))
}

/// Appends rows to a CSV file, writing the header only when the file is new.
pub fn append_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Runs every seed of `config` under `root`, seeds in parallel, rows in seed order.
pub fn run_experiment_in(config: &ExperimentConfig, root: &Path) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let base = root.join(&config.name);
    let rows: Vec<ResultRow> = config.seeds.par_iter().map(|&seed| run_seed(config, seed, &base.join(format!("seed-{seed}")))).collect();
    append_results(&root.join("results.csv"), &rows)?;
    Ok(rows)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    run_experiment_in(config, &output_root(config))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Sigma,
    Rho,
    Rank,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Sigma => "sigma",
            SweepParam::Rho => "rho",
            SweepParam::Rank => "rank",
        }
    }

    /// `config` with this parameter set to `value`, validated.
    pub fn apply(self, config: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = config.clone();
        match self {
            SweepParam::Sigma => c.sigma = Some(value),
            SweepParam::Rho => c.rho = Some(value),
            SweepParam::Rank => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::config(format!("rank {value} is not a positive integer"), &["model.rank"]));
                }
                c.model.rank = value as usize;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma" => Ok(SweepParam::Sigma),
            "rho" => Ok(SweepParam::Rho),
            "rank" => Ok(SweepParam::Rank),
            _ => Err(Error::config(format!("cannot sweep over {s:?}; expected sigma, rho or rank"), &["param"])),
        }
    }
}

/// Mean and sample standard deviation; `std` is 0 for a single value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 { 0.0 } else { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
        Some(Self { mean, std })
    }
}

/// Aggregate over the seeds of one grid value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: SweepParam,
    pub value: f64,
    pub method: Method,
    pub runs: usize,
    pub failed: usize,
    pub test_accuracy_mean: Option<f64>,
    pub test_accuracy_std: Option<f64>,
    pub sharpness_mean: Option<f64>,
    pub sharpness_std: Option<f64>,
    pub accuracy_gap_mean: Option<f64>,
    pub accuracy_gap_std: Option<f64>,
    pub loss_gap_mean: Option<f64>,
    pub loss_gap_std: Option<f64>,
}

fn aggregate(param: SweepParam, value: f64, method: Method, rows: &[ResultRow]) -> SweepPoint {
    let ok: Vec<&ResultRow> = rows.iter().filter(|r| r.status == RunStatus::Ok).collect();
    let stat = |f: fn(&ResultRow) -> Option<f64>| MeanStd::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
    let (acc, sharp, agap, lgap) = (stat(|r| r.test_accuracy), stat(|r| r.sharpness), stat(|r| r.accuracy_gap), stat(|r| r.loss_gap));
    SweepPoint {
        param,
        value,
        method,
        runs: rows.len(),
        failed: rows.len() - ok.len(),
        test_accuracy_mean: acc.map(|s| s.mean),
        test_accuracy_std: acc.map(|s| s.std),
        sharpness_mean: sharp.map(|s| s.mean),
        sharpness_std: sharp.map(|s| s.std),
        accuracy_gap_mean: agap.map(|s| s.mean),
        accuracy_gap_std: agap.map(|s| s.std),
        loss_gap_mean: lgap.map(|s| s.mean),
        loss_gap_std: lgap.map(|s| s.std),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<ResultRow>,
    pub points: Vec<SweepPoint>,
}

fn value_label(v: f64) -> String {
    format!("{v}")
}

/// Runs `config` once per value of `param`; every value gets all seeds.
pub fn sweep_in(config: &ExperimentConfig, param: SweepParam, values: &[f64], root: &Path) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value", &["values"]));
    }
    let configs: Vec<ExperimentConfig> = values.iter().map(|&v| param.apply(config, v)).collect::<Result<_>>()?;
    let base = root.join(&config.name);
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for (cfg, &v) in configs.iter().zip(values) {
        let dir = base.join(format!("{}={}", param.name(), value_label(v)));
        let these: Vec<ResultRow> = cfg.seeds.par_iter().map(|&seed| run_seed(cfg, seed, &dir.join(format!("seed-{seed}")))).collect();
        points.push(aggregate(param, v, cfg.method, &these));
        rows.extend(these);
    }
    append_results(&root.join("results.csv"), &rows)?;
    let mut w = csv::Writer::from_path(base.join(format!("sweep-{}.csv", param.name())))?;
    for p in &points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(SweepResult { rows, points })
}

pub fn sweep(config: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<SweepResult> {
    sweep_in(config, param, values, &output_root(config))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split {s:?}; expected train or test"), &["split"])),
        }
    }
}

/// Loss surface around a saved model on the dataset recorded in its checkpoint.
///
/// Perturbations still active in the checkpoint are removed first, so the
/// surface is centered on the clean merged weights.
pub fn checkpoint_landscape(
    path: &Path,
    dims: usize,
    radius: f64,
    resolution: usize,
    direction_seed: u64,
    split: Split,
) -> Result<LandscapeGrid> {
    let (mut model, header) = checkpoint::load(path)?;
    if !header.perturbations.is_empty() {
        remove_perturbation(&mut model, &header.perturbations)?;
    }
    let spec: DatasetSpec = match header.dataset {
        Some(v) => serde_json::from_value(v)?,
        None => return Err(Error::Contract("checkpoint carries no dataset description".into())),
    };
    let data = make_dataset(&spec, header.seed)?;
    let batch = match split {
        Split::Train => data.train,
        Split::Test => data.test,
    };
    let probe = ModelProbe::new(&model, batch);
    let label = RngStream::new(direction_seed).derive_str("landscape");
    if !(1..=2).contains(&dims) {
        return Err(Error::config(format!("dims must be 1 or 2, got {dims}"), &["dims"]));
    }
    let dirs: Vec<Direction> = (0..dims).map(|k| filter_normalized_direction(probe.base(), label.derive(k as u64))).collect();
    let split_name = if split == Split::Train { "train" } else { "test" };
    loss_surface(&probe, &dirs, resolution, radius, &format!("{}/{split_name}", spec.id(header.seed)))
}
