//! Fixtures shared by the step-cost benchmarks.

use flatlora::config::ExperimentConfig;
use flatlora::data::{make_dataset, DatasetSpec};
use flatlora::trainers::{Method, Trainer};
use flatlora::{build_model, Batch, Model};

/// A freshly built model, its trainer and the full training split of the default blobs task.
pub struct StepFixture {
    pub model: Model,
    pub trainer: Trainer,
    pub batch: Batch,
}

pub fn fixture(method: Method, size: usize) -> StepFixture {
    let mut cfg = ExperimentConfig::new(method, DatasetSpec { size, ..DatasetSpec::default() });
    cfg.steps = 1_000_000;
    let cfg = cfg.resolve().expect("default config resolves");
    let model = build_model(&cfg.model, 0).expect("default model builds");
    let trainer = Trainer::new(cfg.method_config().unwrap(), &model, cfg.optimizer, cfg.steps, 0).unwrap();
    let batch = make_dataset(&cfg.dataset, 0).unwrap().train;
    StepFixture { model, trainer, batch }
}
