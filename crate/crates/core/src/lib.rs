//! Low-rank adaptation trained under filter-norm-scaled random weight
//! perturbations, the SAM baselines it is compared against, and the
//! diagnostics used to measure flatness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod landscape;
pub mod model;
pub mod optim;
pub mod perturb;
pub mod rng;
pub mod tensor;
pub mod trainers;
pub mod validate;

pub use error::{Error, Result};
pub use model::{build_model, Batch, Inputs, Model, ModelSpec, Targets};
pub use perturb::{PerturbationRecord, SigmaSchedule};
pub use rng::RngStream;
pub use tensor::Tensor;
