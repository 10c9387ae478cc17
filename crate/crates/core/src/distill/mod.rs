//! The distillation objective and the two-stage training procedure.
//!
//! Stage 1 trains teacher and student independently with temperature
//! cross-entropy on labeled data. Stage 2 freezes the teacher and trains
//! the student on
//!
//! ```text
//! L_total = CE(student, tau_kd) + KL(teacher || student, tau_kd)
//!         + KL(teacher || student_aux, tau_kd_u)     (unlabeled batch)
//! ```
//!
//! All three terms are means over their batch.

mod loss;
mod optim;
mod sampler;
mod schedule;
mod train;

pub use loss::{
    cross_entropy, cross_entropy_value, kd_loss, kd_loss_unlabeled, kd_loss_value, sskd_total,
    SskdLoss,
};
pub use optim::Optimizer;
pub use sampler::{pk_sample, sample_unlabeled, LabeledSet, UnlabeledSet};
pub use schedule::lr_at;
pub use train::{train_stage1, train_stage2_sskd, EpochLog, TrainConfig, TrainState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureConfig {
    #[serde(default = "TemperatureConfig::default_tau_c")]
    pub tau_c: f64,
    #[serde(default = "TemperatureConfig::default_tau_kd")]
    pub tau_kd: f64,
    #[serde(default = "TemperatureConfig::default_tau_kd_u")]
    pub tau_kd_u: f64,
}

impl TemperatureConfig {
    fn default_tau_c() -> f64 {
        1.0
    }
    fn default_tau_kd() -> f64 {
        16.0
    }
    fn default_tau_kd_u() -> f64 {
        6.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_c", self.tau_c),
            ("tau_kd", self.tau_kd),
            ("tau_kd_u", self.tau_kd_u),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "temps.{name} = {v}: temperatures must be strictly positive"
                )));
            }
        }
        Ok(())
    }
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        Self {
            tau_c: 1.0,
            tau_kd: 16.0,
            tau_kd_u: 6.0,
        }
    }
}

/// P identities × K images per labeled batch, plus the unlabeled batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchPlan {
    pub p_identities: usize,
    pub k_per_identity: usize,
    pub unlabeled_per_step: usize,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            p_identities: 64,
            k_per_identity: 4,
            unlabeled_per_step: 48,
        }
    }
}

impl BatchPlan {
    pub fn labeled_batch_size(&self) -> usize {
        self.p_identities * self.k_per_identity
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_identities == 0 || self.k_per_identity == 0 {
            return Err(Error::Config(
                "batch.p_identities and batch.k_per_identity must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_factor: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 7e-4,
            final_lr: 7e-7,
            warmup_factor: 0.1,
            warmup_epochs: 1,
            total_epochs: 40,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.final_lr > 0.0 && self.final_lr <= self.base_lr && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "schedule needs 0 < final_lr <= base_lr, got final {} base {}",
                self.final_lr, self.base_lr
            )));
        }
        if !(self.warmup_factor > 0.0 && self.warmup_factor <= 1.0) {
            return Err(Error::Config(format!(
                "schedule.warmup_factor must lie in (0, 1], got {}",
                self.warmup_factor
            )));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "schedule.warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Stage-1 student only.
    Baseline,
    /// Stage 2 without the unlabeled term.
    Kd,
    Sskd,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Baseline => "baseline",
            Method::Kd => "kd",
            Method::Sskd => "sskd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Momentum 0.9.
    Sgd,
}

/// Which temperature the stage-2 cross-entropy term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeTemperature {
    /// `tau_kd`, as written in the total objective.
    #[default]
    Kd,
    /// `tau_c`, the stage-1 temperature.
    Base,
}
