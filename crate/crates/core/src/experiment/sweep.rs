use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{parse_toml, ExperimentConfig};
use super::report::{MethodReport, REPORT_FORMAT, REPORT_VERSION};
use super::runner::{prepare, run_variants, RunOutcome, Variant};
use crate::distill::{Method, TemperatureConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TauKdU,
    UnlabeledFraction,
    /// Width of every teacher hidden layer.
    TeacherCapacity,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::TauKdU => "tau_kd_u",
            SweepAxis::UnlabeledFraction => "unlabeled_fraction",
            SweepAxis::TeacherCapacity => "teacher_capacity",
        })
    }
}

/// Base experiment, inline or as a path relative to the sweep file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaseRef {
    Path(PathBuf),
    Inline(Box<ExperimentConfig>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub base: BaseRef,
}

/// A sweep with its base config loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub base: ExperimentConfig,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<ResolvedSweep> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: SweepConfig = parse_toml(&text, path)?;
        let base = match raw.base {
            BaseRef::Inline(c) => *c,
            BaseRef::Path(p) => {
                let p = path.parent().unwrap_or(Path::new(".")).join(p);
                ExperimentConfig::load(&p)?
            }
        };
        let s = ResolvedSweep {
            axis: raw.axis,
            values: raw.values,
            base,
        };
        s.validate()?;
        Ok(s)
    }
}

impl ResolvedSweep {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep values must be non-empty".into()));
        }
        for &v in &self.values {
            self.point_config(v)?.validate()?;
        }
        Ok(())
    }

    /// The experiment config a sweep point resolves to.
    pub fn point_config(&self, v: f64) -> Result<ExperimentConfig> {
        let mut c = self.base.clone();
        let bad = |why: &str| Error::Config(format!("{} value {v}: {why}", self.axis));
        match self.axis {
            SweepAxis::TauKdU => {
                c.train.temps = TemperatureConfig {
                    tau_kd_u: v,
                    ..c.train.temps
                };
            }
            SweepAxis::UnlabeledFraction => {
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad("fraction must lie in [0, 1]"));
                }
                c.unlabeled_fraction = v;
            }
            SweepAxis::TeacherCapacity => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(bad("width must be a positive integer"));
                }
                for h in &mut c.teacher.hidden_dims {
                    *h = v as usize;
                }
            }
        }
        Ok(c)
    }

    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("sweep serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn apply_fast(&mut self) {
        self.base.apply_fast();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    #[serde(flatten)]
    pub result: MethodReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub format: String,
    pub version: u32,
    pub axis: SweepAxis,
    pub config_hash: String,
    pub sweep: ResolvedSweep,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    /// Plot-ready series, one line per value.
    pub fn csv(&self) -> String {
        let mut s = String::from("value,rank1_mean,rank1_std,map_mean,map_std\n");
        for r in &self.rows {
            let m = &r.result.summary;
            writeln!(s, "{},{},{},{},{}", r.value, m.rank1.mean, m.rank1.std, m.map.mean, m.map.std).unwrap();
        }
        s
    }
}

/// Per-point outcomes plus the assembled report.
pub struct SweepOutput {
    pub report: SweepReport,
    pub outcomes: Vec<Vec<RunOutcome>>,
}

/// Runs every sweep point. Points that only change stage 2 share one
/// stage-1 run per (seed, protocol); capacity points each train their own.
pub fn run_sweep(sweep: &ResolvedSweep) -> Result<SweepOutput> {
    sweep.validate()?;
    let base = &sweep.base;
    let method = base.method;
    let per_point: Vec<Vec<RunOutcome>> = match sweep.axis {
        SweepAxis::TauKdU | SweepAxis::UnlabeledFraction => {
            let prepared = prepare(base)?;
            let variants = sweep
                .values
                .iter()
                .map(|&v| {
                    let c = sweep.point_config(v)?;
                    Ok(Variant {
                        label: format!("{}={v}", sweep.axis),
                        method,
                        temps: c.train.temps,
                        unlabeled_fraction: c.unlabeled_fraction,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let all = run_variants(base, &prepared, &variants)?;
            let mut split: Vec<Vec<RunOutcome>> = vec![Vec::new(); variants.len()];
            for (i, o) in all.into_iter().enumerate() {
                split[i % variants.len()].push(o);
            }
            split
        }
        SweepAxis::TeacherCapacity => sweep
            .values
            .par_iter()
            .map(|&v| {
                let c = sweep.point_config(v)?;
                let prepared = prepare(&c)?;
                run_variants(&c, &prepared, &[Variant::from_config(&c, method)])
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let rows = sweep
        .values
        .iter()
        .zip(&per_point)
        .map(|(&value, outs)| SweepRow {
            value,
            result: MethodReport::from_outcomes(method, &outs.iter().collect::<Vec<_>>(), &base.seeds),
        })
        .collect();
    Ok(SweepOutput {
        report: SweepReport {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            axis: sweep.axis,
            config_hash: sweep.content_hash(),
            sweep: sweep.clone(),
            seeds: base.seeds.clone(),
            rows,
        },
        outcomes: per_point,
    })
}

/// Convenience for a single-method run on the given seeds: a sweep whose
/// points are methods instead of values.
pub fn run_methods(cfg: &ExperimentConfig, methods: &[Method]) -> Result<Vec<(Method, MethodReport)>> {
    let prepared = prepare(cfg)?;
    let variants: Vec<Variant> = methods.iter().map(|&m| Variant::from_config(cfg, m)).collect();
    let all = run_variants(cfg, &prepared, &variants)?;
    Ok(methods
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let outs: Vec<&RunOutcome> = all.iter().skip(i).step_by(methods.len()).collect();
            (m, MethodReport::from_outcomes(m, &outs, &cfg.seeds))
        })
        .collect())
}
