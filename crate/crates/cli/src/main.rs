use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sskd_core::experiment::{self, ExperimentConfig, SweepConfig};
use sskd_core::Error;

/// Semi-supervised knowledge distillation experiments on synthetic domains.
#[derive(Parser)]
#[command(name = "sskd", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and evaluate one configuration.
    Run(Common),
    /// Run a sweep over tau_kd_u, unlabeled_fraction or teacher_capacity.
    Sweep(Common),
    /// Evaluate a checkpoint on the config's protocols.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the benchmark as JSONL manifests.
    Gen(Common),
    /// Check a config without running it. Exit code 0 if valid, 2 if not.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults to the shipped configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Short epoch budget for smoke runs.
    #[arg(long)]
    fast: bool,
}

fn load_experiment(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default_config(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if c.fast {
        cfg.apply_fast();
    }
    Ok(cfg)
}

fn is_sweep(path: &Path) -> bool {
    std::fs::read_to_string(path).is_ok_and(|t| t.lines().any(|l| l.trim_start().starts_with("axis")))
}

fn validate(config: Option<&Path>) -> ExitCode {
    let res = match config {
        None => Ok(()),
        Some(p) if is_sweep(p) => SweepConfig::load(p).map(|_| ()),
        Some(p) => ExperimentConfig::load(p).map(|_| ()),
    };
    match res {
        Ok(()) => {
            println!("ok");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("invalid: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run(c) => {
            let cfg = load_experiment(&c)?;
            let r = experiment::run(&cfg, &c.out)?;
            let s = &r.result.summary;
            println!(
                "{} rank-1 {:.2} ± {:.2}  mAP {:.2} ± {:.2}  -> {}",
                cfg.method,
                100.0 * s.rank1.mean,
                100.0 * s.rank1.std,
                100.0 * s.map.mean,
                100.0 * s.map.std,
                c.out.join("report.json").display()
            );
        }
        Cmd::Sweep(c) => {
            let path = c.config.as_deref().context("sweep needs --config <sweep.toml>")?;
            let mut s = SweepConfig::load(path)?;
            if let Some(seed) = c.seed {
                s.base.seeds = vec![seed];
            }
            if c.fast {
                s.apply_fast();
            }
            let r = experiment::sweep(&s, &c.out)?;
            print!("{}", r.csv());
        }
        Cmd::Eval { common, checkpoint } => {
            let cfg = load_experiment(&common)?;
            let r = experiment::eval_checkpoint(&cfg, &checkpoint)?;
            for e in &r.results {
                println!(
                    "{} {}: rank-1 {:.2} mAP {:.2} ({} skipped)",
                    e.protocol,
                    e.domain,
                    100.0 * e.result.rank1(),
                    100.0 * e.result.map,
                    e.result.skipped
                );
            }
            let path = common.out.join("eval_report.json");
            let mut bytes = serde_json::to_vec_pretty(&r)?;
            bytes.push(b'\n');
            sskd_core::io::write_atomic(&path, &bytes)?;
        }
        Cmd::Gen(c) => {
            let cfg = load_experiment(&c)?;
            for f in experiment::generate_benchmark(&cfg, &c.out)? {
                println!("{}", c.out.join(f).display());
            }
        }
        Cmd::Validate { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Cmd::Validate { config } = &cli.cmd {
        return validate(config.as_deref());
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invalid = matches!(
                e.downcast_ref::<Error>(),
                Some(Error::Config(_) | Error::Parse { .. } | Error::Parameter(_))
            );
            ExitCode::from(if invalid { 2 } else { 1 })
        }
    }
}
