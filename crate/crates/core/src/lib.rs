//! Semi-supervised knowledge distillation for domain-generalizable
//! embedding learning.
//!
//! A teacher and a student embedding model are first trained on labeled
//! multi-domain data. The teacher is then frozen and the student is
//! distilled from it on labeled data and, through an auxiliary classifier,
//! on an unlabeled pool. Retrieval quality is measured with CMC rank-k and
//! mAP on domains never seen during training.
//!
//! Modules:
//! - [`autodiff`]: dense tensors and reverse-mode differentiation
//! - [`model`]: MLP extractors with main and auxiliary heads
//! - [`distill`]: losses, samplers, learning-rate schedule, two-stage training
//! - [`domainsim`]: synthetic multi-domain data, manifests, protocols
//! - [`eval`]: distance matrices, CMC and mAP, protocol evaluation
//! - [`experiment`]: config-driven runs and sweeps with JSON reports

pub mod autodiff;
pub mod distill;
pub mod domainsim;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod model;

pub use autodiff::{Tape, Tensor, Var};
pub use distill::{
    BatchPlan, Method, OptimizerKind, ScheduleConfig, TemperatureConfig, TrainState,
};
pub use domainsim::{DomainShift, DomainSpec, ProtocolMode, ProtocolSpec, SampleRecord};
pub use error::{Error, Result};
pub use eval::EvalResult;
pub use model::{build_model, Embedding, ExtractorConfig, Model};
