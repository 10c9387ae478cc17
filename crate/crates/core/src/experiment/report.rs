use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::runner::{summarize, summarize_by_protocol, FinalLosses, MetricSummary, RunOutcome};
use crate::distill::Method;
use crate::error::Result;
use crate::io::write_atomic;

pub const REPORT_FORMAT: &str = "sskd-report";
pub const REPORT_VERSION: u32 = 1;

/// Metrics of one (seed, protocol, test domain).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub protocol: String,
    pub domain: String,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub num_queries: usize,
    pub skipped: usize,
    pub losses: FinalLosses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

/// Results of one method (or sweep point) across seeds and protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub runs: Vec<RunRecord>,
    pub per_seed: Vec<SeedRecord>,
    pub per_protocol: BTreeMap<String, MetricSummary>,
    pub summary: MetricSummary,
}

impl MethodReport {
    pub fn from_outcomes(method: Method, outcomes: &[&RunOutcome], seeds: &[u64]) -> Self {
        let runs = outcomes
            .iter()
            .flat_map(|o| {
                o.results.iter().map(|(dom, r)| RunRecord {
                    seed: o.seed,
                    protocol: o.protocol.clone(),
                    domain: dom.clone(),
                    rank1: r.rank_k[&1],
                    rank5: r.rank_k[&5],
                    rank10: r.rank_k[&10],
                    map: r.map,
                    num_queries: r.num_queries,
                    skipped: r.skipped,
                    losses: o.losses.clone(),
                })
            })
            .collect();
        let per_seed = seeds
            .iter()
            .map(|&s| {
                let sub: Vec<&RunOutcome> = outcomes.iter().copied().filter(|o| o.seed == s).collect();
                let m = summarize(&sub, &[s]);
                SeedRecord {
                    seed: s,
                    rank1: m.rank1.mean,
                    map: m.map.mean,
                }
            })
            .collect();
        Self {
            method,
            runs,
            per_seed,
            per_protocol: summarize_by_protocol(outcomes, seeds),
            summary: summarize(outcomes, seeds),
        }
    }
}

/// Report of a single `run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    #[serde(flatten)]
    pub result: MethodReport,
}

impl Report {
    pub fn new(cfg: &ExperimentConfig, result: MethodReport) -> Self {
        Self {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            config_hash: cfg.content_hash(),
            config: cfg.clone(),
            seeds: cfg.seeds.clone(),
            result,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
