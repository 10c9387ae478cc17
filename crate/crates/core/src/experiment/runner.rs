use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::distill::{
    train_stage1, train_stage2_sskd, EpochLog, LabeledSet, Method, TemperatureConfig, TrainConfig,
    UnlabeledSet,
};
use crate::domainsim::{mix_seed, str_seed, BenchmarkData, ProtocolSpec, SampleRecord};
use crate::error::{Error, Result};
use crate::eval::{run_protocol, EvalResult};
use crate::model::{build_model, Model};

/// One stage-2 treatment applied after a shared stage 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub method: Method,
    pub temps: TemperatureConfig,
    pub unlabeled_fraction: f64,
}

impl Variant {
    pub fn from_config(cfg: &ExperimentConfig, method: Method) -> Self {
        Self {
            label: method.to_string(),
            method,
            temps: cfg.train.temps,
            unlabeled_fraction: cfg.unlabeled_fraction,
        }
    }
}

/// Final-epoch training losses of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalLosses {
    pub stage1_student_ce: f64,
    pub stage1_teacher_ce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kd_u: Option<f64>,
}

/// Outcome of one (seed, protocol, variant).
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub protocol: String,
    pub variant: String,
    pub method: Method,
    pub results: Vec<(String, EvalResult)>,
    pub losses: FinalLosses,
    pub log: Vec<EpochLog>,
    pub student: Model,
}

/// Generated benchmark and the protocols a config evaluates.
pub struct Prepared {
    pub data: BenchmarkData,
    pub protocols: Vec<ProtocolSpec>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let bench = cfg.benchmark.to_benchmark();
    Ok(Prepared {
        data: bench.generate()?,
        protocols: cfg.protocols()?,
    })
}

fn source_records(data: &BenchmarkData, p: &ProtocolSpec) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for s in &p.sources {
        out.extend(
            data.domains
                .get(s)
                .ok_or_else(|| Error::Protocol(format!("source {s} not generated")))?
                .iter()
                .cloned(),
        );
    }
    Ok(out)
}

fn last_stage(log: &[EpochLog], stage: u8) -> Option<&EpochLog> {
    log.iter().rev().find(|l| l.stage == stage)
}

/// Runs stage 1 once for (`seed`, `protocol`) and every variant's stage 2
/// on top of it. Variants are independent of each other.
pub fn run_job(
    cfg: &ExperimentConfig,
    data: &BenchmarkData,
    protocol: &ProtocolSpec,
    seed: u64,
    variants: &[Variant],
) -> Result<Vec<RunOutcome>> {
    let fold = str_seed(&protocol.name);
    let labeled = LabeledSet::from_records(&source_records(data, protocol)?)?;
    let k = labeled.num_classes();
    let d = cfg.benchmark.input_dim;
    let student = build_model(&cfg.student.extractor(d, mix_seed(&[seed, 1])), k, Some(k))?;
    let teacher = build_model(&cfg.teacher.extractor(d, mix_seed(&[seed, 2])), k, None)?;
    let stage1 = train_stage1(
        student,
        teacher,
        &labeled,
        &cfg.train,
        cfg.epochs.stage1,
        mix_seed(&[seed, 3, fold]),
    )?;
    let s1 = last_stage(&stage1.log, 1);
    let base_losses = FinalLosses {
        stage1_student_ce: s1.map_or(f64::NAN, |l| l.student_ce),
        stage1_teacher_ce: s1.and_then(|l| l.teacher_ce).unwrap_or(f64::NAN),
        stage2_ce: None,
        kd: None,
        kd_u: None,
    };

    variants
        .iter()
        .map(|v| {
            let (state, losses) = match v.method {
                Method::Baseline => (stage1.clone(), base_losses.clone()),
                Method::Kd | Method::Sskd => {
                    let mut tc: TrainConfig = cfg.train.clone();
                    tc.temps = v.temps;
                    let pool = match (v.method, &data.pool) {
                        (Method::Sskd, Some(pool)) if v.unlabeled_fraction > 0.0 => {
                            let sub = pool.subsample(v.unlabeled_fraction, mix_seed(&[seed, 5]))?;
                            Some(UnlabeledSet::from_records(&sub.records)?)
                        }
                        (Method::Sskd, None) => {
                            return Err(Error::Config("sskd needs an unlabeled pool".into()))
                        }
                        _ => None,
                    };
                    if pool.as_ref().is_none_or(|p| p.is_empty()) {
                        tc.batch.unlabeled_per_step = 0;
                    }
                    let state = train_stage2_sskd(
                        stage1.clone(),
                        &labeled,
                        pool.as_ref(),
                        &tc,
                        cfg.epochs.stage2,
                        mix_seed(&[seed, 4, fold]),
                    )?;
                    let s2 = last_stage(&state.log, 2);
                    let losses = FinalLosses {
                        stage2_ce: s2.map(|l| l.student_ce),
                        kd: s2.and_then(|l| l.kd),
                        kd_u: s2.and_then(|l| l.kd_u),
                        ..base_losses.clone()
                    };
                    (state, losses)
                }
            };
            let results = run_protocol(protocol, &state.student, data, cfg.split_seed)?;
            Ok(RunOutcome {
                seed,
                protocol: protocol.name.clone(),
                variant: v.label.clone(),
                method: v.method,
                results,
                losses,
                log: state.log,
                student: state.student,
            })
        })
        .collect()
}

/// Every (seed, protocol) job in parallel; outcomes come back ordered by
/// seed, then protocol, then variant.
pub fn run_variants(cfg: &ExperimentConfig, prepared: &Prepared, variants: &[Variant]) -> Result<Vec<RunOutcome>> {
    let jobs: Vec<(u64, &ProtocolSpec)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| prepared.protocols.iter().map(move |p| (s, p)))
        .collect();
    let nested = jobs
        .par_iter()
        .map(|(seed, p)| run_job(cfg, &prepared.data, p, *seed, variants))
        .collect::<Result<Vec<_>>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub rank1: MeanStd,
    #[serde(rename = "mAP")]
    pub map: MeanStd,
}

/// Fold-averaged metric per seed, then mean ± std across seeds.
pub fn summarize(outcomes: &[&RunOutcome], seeds: &[u64]) -> MetricSummary {
    let per_seed = |f: &dyn Fn(&EvalResult) -> f64| -> Vec<f64> {
        seeds
            .iter()
            .map(|s| {
                let vals: Vec<f64> = outcomes
                    .iter()
                    .filter(|o| o.seed == *s)
                    .flat_map(|o| o.results.iter().map(|(_, r)| f(r)))
                    .collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect()
    };
    MetricSummary {
        rank1: MeanStd::of(&per_seed(&|r| r.rank1())),
        map: MeanStd::of(&per_seed(&|r| r.map)),
    }
}

/// Per-protocol summaries keyed by protocol name.
pub fn summarize_by_protocol(outcomes: &[&RunOutcome], seeds: &[u64]) -> BTreeMap<String, MetricSummary> {
    let mut names: Vec<&str> = outcomes.iter().map(|o| o.protocol.as_str()).collect();
    names.dedup();
    names
        .into_iter()
        .map(|n| {
            let sub: Vec<&RunOutcome> = outcomes.iter().copied().filter(|o| o.protocol == n).collect();
            (n.to_string(), summarize(&sub, seeds))
        })
        .collect()
}
