use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy, sskd_total};
use super::optim::Optimizer;
use super::sampler::{pk_sample, sample_unlabeled, LabeledSet, UnlabeledSet};
use super::schedule::lr_at;
use super::{BatchPlan, CeTemperature, OptimizerKind, ScheduleConfig, TemperatureConfig};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub temps: TemperatureConfig,
    #[serde(default)]
    pub batch: BatchPlan,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub ce_temperature: CeTemperature,
    /// Multiply both KL terms by τ² (off by default).
    #[serde(default)]
    pub kl_tau_squared: bool,
    /// Optimizer steps per epoch; defaults to one pass over the labeled set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temps: TemperatureConfig::default(),
            batch: BatchPlan::default(),
            schedule: ScheduleConfig::default(),
            optimizer: OptimizerKind::Adam,
            ce_temperature: CeTemperature::Kd,
            kl_tau_squared: false,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.temps.validate()?;
        self.batch.validate()?;
        self.schedule.validate()?;
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        Ok(())
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| n.div_ceil(self.batch.labeled_batch_size()))
            .max(1)
    }
}

/// Per-epoch training metrics; means over the epoch's steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub student_ce: f64,
    pub student_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kd_u: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: Model,
    pub teacher: Model,
    /// Optimizer steps taken on the student across both stages.
    pub step: u64,
    pub seed: u64,
    /// Last completed stage (0 before training).
    pub stage: u8,
    pub log: Vec<EpochLog>,
}

#[derive(Default)]
struct EpochAcc {
    steps: usize,
    lr: f64,
    ce: f64,
    acc: f64,
    teacher_ce: f64,
    kd: f64,
    kd_u: f64,
}

fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = logits.row(*i);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// One cross-entropy step on `model`; returns (loss, batch accuracy).
fn ce_step(model: &mut Model, opt: &mut Optimizer, x: &Tensor, labels: &[usize], tau: f64, lr: f64) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let emb = model.extract(&mut tape, &bound, xv)?;
    let logits = model.main_logits(&mut tape, &bound, emb)?;
    let loss = cross_entropy(&mut tape, logits, labels, tau)?;
    tape.backward(loss)?;
    let value = tape.value(loss).item()?;
    let acc = batch_accuracy(tape.value(logits), labels);
    let grads = bound.grads(&tape);
    opt.step(model, &grads, lr);
    Ok((value, acc))
}

fn progress(step: usize, total: usize) -> f64 {
    if total <= 1 {
        0.0
    } else {
        step as f64 / (total - 1) as f64
    }
}

fn horizon(s: &ScheduleConfig, epochs: usize) -> ScheduleConfig {
    ScheduleConfig {
        total_epochs: epochs,
        warmup_epochs: s.warmup_epochs.min(epochs),
        ..*s
    }
}

/// Stage 1: teacher and student each minimize cross-entropy at `tau_c` on
/// the same PK batches, with separate optimizers.
pub fn train_stage1(
    student: Model,
    teacher: Model,
    data: &LabeledSet,
    cfg: &TrainConfig,
    epochs: usize,
    seed: u64,
) -> Result<TrainState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("empty labeled dataset".into()));
    }
    for (name, m) in [("student", &student), ("teacher", &teacher)] {
        if m.k_main() != data.num_classes() {
            return Err(Error::Config(format!(
                "{name} head has {} classes, data has {}",
                m.k_main(),
                data.num_classes()
            )));
        }
    }
    let mut state = TrainState {
        student,
        teacher,
        step: 0,
        seed,
        stage: 1,
        log: Vec::new(),
    };
    let spe = cfg.steps_per_epoch(data.len());
    let total = epochs * spe;
    let sched = horizon(&cfg.schedule, epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt_s = Optimizer::new(cfg.optimizer, &state.student);
    let mut opt_t = Optimizer::new(cfg.optimizer, &state.teacher);
    let tau = cfg.temps.tau_c;

    for epoch in 0..epochs {
        let mut acc = EpochAcc::default();
        for s in 0..spe {
            let step = epoch * spe + s;
            let lr = lr_at(&sched, progress(step, total));
            let rows = pk_sample(data, cfg.batch.p_identities, cfg.batch.k_per_identity, &mut rng)?;
            let x = data.gather(&rows)?;
            let labels: Vec<usize> = rows.iter().map(|&i| data.labels()[i]).collect();
            let (ce, a) = ce_step(&mut state.student, &mut opt_s, &x, &labels, tau, lr)?;
            let (tce, _) = ce_step(&mut state.teacher, &mut opt_t, &x, &labels, tau, lr)?;
            state.step += 1;
            acc.steps += 1;
            acc.lr = lr;
            acc.ce += ce;
            acc.acc += a;
            acc.teacher_ce += tce;
        }
        let n = acc.steps as f64;
        state.log.push(EpochLog {
            stage: 1,
            epoch,
            lr: acc.lr,
            student_ce: acc.ce / n,
            student_acc: acc.acc / n,
            teacher_ce: Some(acc.teacher_ce / n),
            kd: None,
            kd_u: None,
        });
    }
    Ok(state)
}

/// Stage 2: freezes the teacher and trains the student (both heads) on the
/// full objective. Each step draws one PK labeled batch and one unlabeled
/// batch of `unlabeled_per_step` rows; with zero unlabeled rows this is
/// plain distillation.
pub fn train_stage2_sskd(
    mut state: TrainState,
    labeled: &LabeledSet,
    unlabeled: Option<&UnlabeledSet>,
    cfg: &TrainConfig,
    epochs: usize,
    seed: u64,
) -> Result<TrainState> {
    cfg.validate()?;
    if state.stage < 1 {
        return Err(Error::Usage("stage 2 requires a completed stage 1".into()));
    }
    if labeled.is_empty() {
        return Err(Error::Usage("empty labeled dataset".into()));
    }
    let m = cfg.batch.unlabeled_per_step;
    let pool = match unlabeled {
        Some(u) if !u.is_empty() => Some(u),
        _ if m > 0 => {
            return Err(Error::Config(
                "unlabeled_per_step > 0 but no unlabeled pool was given; use kd mode".into(),
            ))
        }
        _ => None,
    };
    if m > 0 && state.student.k_aux() != Some(state.teacher.k_main()) {
        return Err(Error::Config(format!(
            "student aux head {:?} must match teacher width {}",
            state.student.k_aux(),
            state.teacher.k_main()
        )));
    }
    state.teacher = state.teacher.freeze();

    let t = &cfg.temps;
    let ce_tau = match cfg.ce_temperature {
        CeTemperature::Kd => t.tau_kd,
        CeTemperature::Base => t.tau_c,
    };
    let kl_weights = if cfg.kl_tau_squared {
        (t.tau_kd * t.tau_kd, t.tau_kd_u * t.tau_kd_u)
    } else {
        (1.0, 1.0)
    };
    let spe = cfg.steps_per_epoch(labeled.len());
    let total = epochs * spe;
    let sched = horizon(&cfg.schedule, epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(cfg.optimizer, &state.student);

    for epoch in 0..epochs {
        let mut acc = EpochAcc::default();
        for s in 0..spe {
            let step = epoch * spe + s;
            let lr = lr_at(&sched, progress(step, total));
            let rows = pk_sample(labeled, cfg.batch.p_identities, cfg.batch.k_per_identity, &mut rng)?;
            let x = labeled.gather(&rows)?;
            let labels: Vec<usize> = rows.iter().map(|&i| labeled.labels()[i]).collect();
            let ux = match pool {
                Some(u) if m > 0 => Some(u.gather(&sample_unlabeled(u, m, &mut rng)?)?),
                _ => None,
            };

            let mut tape = Tape::new();
            let bound = state.student.bind(&mut tape, true);
            let loss = sskd_total(
                &mut tape,
                &state.student,
                &bound,
                &state.teacher,
                &x,
                &labels,
                ux.as_ref(),
                ce_tau,
                t.tau_kd,
                t.tau_kd_u,
                kl_weights,
            )?;
            tape.backward(loss.total)?;
            let grads = bound.grads(&tape);
            opt.step(&mut state.student, &grads, lr);
            state.step += 1;

            acc.steps += 1;
            acc.lr = lr;
            acc.ce += tape.value(loss.ce).item()?;
            acc.acc += batch_accuracy(tape.value(loss.logits), &labels);
            acc.kd += tape.value(loss.kd).item()?;
            if let Some(v) = loss.kd_u {
                acc.kd_u += tape.value(v).item()?;
            }
        }
        let n = acc.steps as f64;
        state.log.push(EpochLog {
            stage: 2,
            epoch,
            lr: acc.lr,
            student_ce: acc.ce / n,
            student_acc: acc.acc / n,
            teacher_ce: None,
            kd: Some(acc.kd / n),
            kd_u: pool.filter(|_| m > 0).map(|_| acc.kd_u / n),
        });
    }
    state.stage = 2;
    Ok(state)
}
