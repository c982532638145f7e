//! Synthetic datasets with deterministic, disjoint train/test splits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Inputs, Targets};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    GaussianBlobs,
    TwoSpirals,
    TokenSequenceParity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub size: usize,
    pub classes: usize,
    /// Feature noise std (blobs, spirals); unused for parity.
    pub noise: f64,
    /// Probability of replacing a label by a uniformly drawn one.
    pub label_noise: f64,
    pub test_fraction: f64,
    /// `None` uses the run seed.
    pub seed: Option<u64>,
    pub input_dim: usize,
    pub seq_len: usize,
    pub vocab: usize,
    /// Leading positions whose odd tokens are counted for the parity label.
    pub marked: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussianBlobs,
            size: 2000,
            classes: 2,
            noise: 1.0,
            label_noise: 0.0,
            test_fraction: 0.5,
            seed: None,
            input_dim: 2,
            seq_len: 16,
            vocab: 16,
            marked: 2,
        }
    }
}

/// Distance of blob centers from the origin.
const BLOB_RADIUS: f64 = 2.0;

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.classes < 2 {
            bad.push("dataset.classes");
        }
        if self.size < self.classes.max(2) {
            bad.push("dataset.size");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            bad.push("dataset.noise");
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            bad.push("dataset.label_noise");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            bad.push("dataset.test_fraction");
        }
        match self.kind {
            DatasetKind::GaussianBlobs | DatasetKind::TwoSpirals => {
                if self.input_dim < 2 {
                    bad.push("dataset.input_dim");
                }
            }
            DatasetKind::TokenSequenceParity => {
                if self.classes != 2 {
                    bad.push("dataset.classes");
                }
                if self.vocab < 2 {
                    bad.push("dataset.vocab");
                }
                if self.marked == 0 || self.marked > self.seq_len {
                    bad.push("dataset.marked");
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            bad.dedup();
            Err(Error::config("invalid dataset", &bad))
        }
    }

    /// Identifier used in landscape metadata and logs.
    pub fn id(&self, seed: u64) -> String {
        let kind = serde_json::to_value(self.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        format!("{kind}-n{}-c{}-s{}", self.size, self.classes, self.seed.unwrap_or(seed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Batch,
    pub test: Batch,
}

/// Samples one full dataset and splits it; `run_seed` is used when the spec has no seed.
pub fn make_dataset(spec: &DatasetSpec, run_seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let root = RngStream::new(spec.seed.unwrap_or(run_seed)).derive_str("data");
    let n = spec.size;
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    let inputs = match spec.kind {
        DatasetKind::GaussianBlobs => blobs(spec, &labels, root.derive_str("features")),
        DatasetKind::TwoSpirals => spirals(spec, &labels, root.derive_str("features")),
        DatasetKind::TokenSequenceParity => {
            let (ids, parity) = parity(spec, root.derive_str("tokens"));
            labels = parity;
            Inputs::Tokens { ids, seq_len: spec.seq_len }
        }
    };
    if spec.label_noise > 0.0 {
        let mut s = root.derive_str("label_noise");
        let flips = s.uniforms(n);
        for (l, u) in labels.iter_mut().zip(flips) {
            if u < spec.label_noise {
                *l = s.below(spec.classes);
            }
        }
    }
    let all = Batch { inputs, targets: Targets::Classes(labels) };
    let order = root.derive_str("split").permutation(n);
    let n_test = ((n as f64 * spec.test_fraction).round() as usize).clamp(1, n - 1);
    let (test_idx, train_idx) = order.split_at(n_test);
    Ok(Dataset { train: select(&all, train_idx), test: select(&all, test_idx) })
}

fn blobs(spec: &DatasetSpec, labels: &[usize], mut s: RngStream) -> Inputs {
    let d = spec.input_dim;
    let z = s.normals(labels.len() * d);
    let mut x = Vec::with_capacity(labels.len() * d);
    for (i, &l) in labels.iter().enumerate() {
        let angle = std::f64::consts::TAU * l as f64 / spec.classes as f64;
        for k in 0..d {
            let center = match k {
                0 => BLOB_RADIUS * angle.cos(),
                1 => BLOB_RADIUS * angle.sin(),
                _ => 0.0,
            };
            x.push(center + spec.noise * z[i * d + k]);
        }
    }
    Inputs::Features(Tensor::new(vec![labels.len(), d], x).expect("sizes agree"))
}

fn spirals(spec: &DatasetSpec, labels: &[usize], mut s: RngStream) -> Inputs {
    let d = spec.input_dim;
    let t = s.uniforms(labels.len());
    let z = s.normals(labels.len() * d);
    let mut x = Vec::with_capacity(labels.len() * d);
    for (i, &l) in labels.iter().enumerate() {
        let r = 0.25 + 0.75 * t[i];
        let angle = 3.0 * std::f64::consts::PI * r + std::f64::consts::TAU * l as f64 / spec.classes as f64;
        for k in 0..d {
            let c = match k {
                0 => BLOB_RADIUS * r * angle.cos(),
                1 => BLOB_RADIUS * r * angle.sin(),
                _ => 0.0,
            };
            x.push(c + spec.noise * z[i * d + k]);
        }
    }
    Inputs::Features(Tensor::new(vec![labels.len(), d], x).expect("sizes agree"))
}

fn parity(spec: &DatasetSpec, mut s: RngStream) -> (Vec<usize>, Vec<usize>) {
    let ids: Vec<usize> = (0..spec.size * spec.seq_len).map(|_| s.below(spec.vocab)).collect();
    let labels = ids.chunks(spec.seq_len).map(|seq| seq[..spec.marked].iter().filter(|&&t| t % 2 == 1).count() % 2).collect();
    (ids, labels)
}

/// Rows `idx` of a batch, in the given order.
pub fn select(batch: &Batch, idx: &[usize]) -> Batch {
    let inputs = match &batch.inputs {
        Inputs::Features(x) => {
            let d = x.last_dim();
            let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
            Inputs::Features(Tensor::new(vec![idx.len(), d], data).expect("sizes agree"))
        }
        Inputs::Tokens { ids, seq_len } => Inputs::Tokens {
            ids: idx.iter().flat_map(|&i| ids[i * seq_len..(i + 1) * seq_len].iter().copied()).collect(),
            seq_len: *seq_len,
        },
    };
    let targets = match &batch.targets {
        Targets::Classes(l) => Targets::Classes(idx.iter().map(|&i| l[i]).collect()),
        Targets::Values(v) => {
            let d = v.last_dim();
            let data = idx.iter().flat_map(|&i| v.row(i).iter().copied()).collect();
            Targets::Values(Tensor::new(vec![idx.len(), d], data).expect("sizes agree"))
        }
    };
    Batch { inputs, targets }
}

/// Deterministic minibatch schedule: each epoch is a fresh permutation.
#[derive(Debug, Clone)]
pub struct Batcher {
    n: usize,
    size: usize,
    stream: RngStream,
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    /// `size = None` or `size >= n` yields the full batch every step.
    pub fn new(n: usize, size: Option<usize>, seed: u64) -> Self {
        let size = size.unwrap_or(n).clamp(1, n);
        Self { n, size, stream: RngStream::new(seed).derive_str("batches"), order: Vec::new(), cursor: n }
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.size == self.n {
            return (0..self.n).collect();
        }
        if self.cursor + self.size > self.n {
            self.order = self.stream.permutation(self.n);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.size].to_vec();
        self.cursor += self.size;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(b: &Batch) -> &Tensor {
        match &b.inputs {
            Inputs::Features(x) => x,
            _ => panic!("expected features"),
        }
    }

    #[test]
    fn same_seed_same_bytes_and_sizes_add_up() {
        for kind in [DatasetKind::GaussianBlobs, DatasetKind::TwoSpirals, DatasetKind::TokenSequenceParity] {
            let spec = DatasetSpec { kind, size: 101, ..DatasetSpec::default() };
            let a = make_dataset(&spec, 3).unwrap();
            let b = make_dataset(&spec, 3).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.train.len() + a.test.len(), 101);
            assert_ne!(make_dataset(&spec, 4).unwrap(), a);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let spec = DatasetSpec { size: 200, noise: 0.5, ..DatasetSpec::default() };
        let d = make_dataset(&spec, 0).unwrap();
        let rows = |b: &Batch| features(b).rows().map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        let train = rows(&d.train);
        for r in rows(&d.test) {
            assert!(!train.contains(&r));
        }
    }

    #[test]
    fn zero_noise_blobs_sit_on_centers() {
        let spec = DatasetSpec { noise: 0.0, classes: 3, size: 30, ..DatasetSpec::default() };
        let d = make_dataset(&spec, 0).unwrap();
        let Targets::Classes(labels) = &d.train.targets else { panic!() };
        for (row, &l) in features(&d.train).rows().zip(labels) {
            let angle = std::f64::consts::TAU * l as f64 / 3.0;
            assert_eq!(row, &[2.0 * angle.cos(), 2.0 * angle.sin()]);
        }
    }

    #[test]
    fn parity_labels_follow_marked_tokens() {
        let spec = DatasetSpec { kind: DatasetKind::TokenSequenceParity, size: 50, marked: 3, ..DatasetSpec::default() };
        let d = make_dataset(&spec, 1).unwrap();
        let Inputs::Tokens { ids, seq_len } = &d.train.inputs else { panic!() };
        let Targets::Classes(labels) = &d.train.targets else { panic!() };
        for (seq, &l) in ids.chunks(*seq_len).zip(labels) {
            assert_eq!(seq[..3].iter().filter(|&&t| t % 2 == 1).count() % 2, l);
        }
    }

    #[test]
    fn too_small_is_a_config_error() {
        let spec = DatasetSpec { size: 2, classes: 3, ..DatasetSpec::default() };
        match make_dataset(&spec, 0) {
            Err(Error::Config { keys, .. }) => assert!(keys.contains(&"dataset.size".to_string())),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batcher_covers_each_epoch() {
        let mut b = Batcher::new(10, Some(5), 0);
        let mut seen: Vec<usize> = b.next_indices();
        seen.extend(b.next_indices());
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut full = Batcher::new(4, None, 0);
        assert_eq!(full.next_indices(), vec![0, 1, 2, 3]);
    }
}
