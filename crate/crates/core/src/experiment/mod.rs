//! Config-driven experiments: single runs, method ladders and sweeps, with
//! JSON reports that embed the resolved config and its hash.
//!
//! Output layout of [`run`]:
//!
//! ```text
//! <out>/report.json
//! <out>/train_log.jsonl
//! <out>/checkpoints/seed<S>_<held-out>.json
//! ```

mod config;
mod report;
mod runner;
mod sweep;

use std::path::Path;

use serde::Serialize;

pub use config::{
    BenchmarkConfig, DomainConfig, EpochConfig, ExperimentConfig, ModelConfig, ProtocolConfig, ShiftConfig,
    DEFAULT_CONFIG_TOML, FAST_EPOCHS,
};
pub use report::{MethodReport, Report, RunRecord, SeedRecord, REPORT_FORMAT, REPORT_VERSION};
pub use runner::{
    prepare, run_job, run_variants, summarize, FinalLosses, MeanStd, MetricSummary, Prepared, RunOutcome, Variant,
};
pub use sweep::{
    run_methods, run_sweep, BaseRef, ResolvedSweep, SweepAxis, SweepConfig, SweepOutput, SweepReport, SweepRow,
};

use crate::distill::EpochLog;
use crate::domainsim::write_manifest;
use crate::error::{Error, Result};
use crate::eval::{run_protocol, EvalResult};
use crate::io::write_atomic;
use crate::model::Model;

#[derive(Serialize)]
struct LogLine<'a> {
    seed: u64,
    protocol: &'a str,
    #[serde(flatten)]
    epoch: &'a EpochLog,
}

fn train_log(outcomes: &[RunOutcome]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for o in outcomes {
        for e in &o.log {
            serde_json::to_writer(
                &mut buf,
                &LogLine {
                    seed: o.seed,
                    protocol: &o.protocol,
                    epoch: e,
                },
            )?;
            buf.push(b'\n');
        }
    }
    Ok(buf)
}

fn checkpoint_name(o: &RunOutcome) -> String {
    let held = o.protocol.rsplit("->").next().unwrap_or(&o.protocol);
    format!("seed{}_{}.json", o.seed, held)
}

/// Trains and evaluates `cfg.method`, writing the report, training log and
/// student checkpoints under `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Report> {
    let prepared = prepare(cfg)?;
    let outcomes = run_variants(cfg, &prepared, &[Variant::from_config(cfg, cfg.method)])?;
    for o in &outcomes {
        o.student.save(&out.join("checkpoints").join(checkpoint_name(o)))?;
    }
    write_atomic(&out.join("train_log.jsonl"), &train_log(&outcomes)?)?;
    let refs: Vec<&RunOutcome> = outcomes.iter().collect();
    let report = Report::new(cfg, MethodReport::from_outcomes(cfg.method, &refs, &cfg.seeds));
    report.write(&out.join("report.json"))?;
    Ok(report)
}

/// Runs a sweep and writes `sweep_report.json` and `sweep.csv` under `out`.
pub fn sweep(s: &ResolvedSweep, out: &Path) -> Result<SweepReport> {
    let o = run_sweep(s)?;
    o.report.write(&out.join("sweep_report.json"))?;
    write_atomic(&out.join("sweep.csv"), o.report.csv().as_bytes())?;
    Ok(o.report)
}

/// Evaluation of a stored checkpoint.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub checkpoint: String,
    pub results: Vec<EvalEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalEntry {
    pub protocol: String,
    pub domain: String,
    #[serde(flatten)]
    pub result: EvalResult,
}

/// Evaluates a checkpoint on the test domains of the config's protocols.
pub fn eval_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    let model = Model::load(checkpoint)?;
    if model.config().input_dim != cfg.benchmark.input_dim {
        return Err(Error::Config(format!(
            "checkpoint input_dim {} != benchmark input_dim {}",
            model.config().input_dim,
            cfg.benchmark.input_dim
        )));
    }
    let prepared = prepare(cfg)?;
    let mut results = Vec::new();
    for p in &prepared.protocols {
        for (domain, result) in run_protocol(p, &model, &prepared.data, cfg.split_seed)? {
            results.push(EvalEntry {
                protocol: p.name.clone(),
                domain,
                result,
            });
        }
    }
    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        config_hash: cfg.content_hash(),
        checkpoint: checkpoint.display().to_string(),
        results,
    })
}

/// Materializes the benchmark: one manifest per domain, the pool manifest,
/// the sealed pool identities and the resolved benchmark spec.
pub fn generate_benchmark(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let bench = cfg.benchmark.to_benchmark();
    let data = bench.generate()?;
    let mut written = Vec::new();
    for (name, records) in &data.domains {
        let f = format!("{name}.jsonl");
        write_manifest(&out.join(&f), records)?;
        written.push(f);
    }
    if let (Some(pool), Some(sealed)) = (&data.pool, &data.sealed) {
        let f = format!("{}.jsonl", pool.domain);
        write_manifest(&out.join(&f), &pool.records)?;
        written.push(f);
        sealed.write(&out.join("sealed_identities.json"))?;
        written.push("sealed_identities.json".into());
    }
    let mut spec = serde_json::to_vec_pretty(&bench)?;
    spec.push(b'\n');
    write_atomic(&out.join("benchmark.json"), &spec)?;
    written.push("benchmark.json".into());
    Ok(written)
}
