use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{Method, TrainConfig};
use crate::domainsim::{
    build_protocol, mix_seed, Benchmark, DomainShift, DomainSpec, ProtocolMode, ProtocolSpec,
    PrototypeBank,
};
use crate::error::{Error, Result};
use crate::model::ExtractorConfig;

/// The configuration shipped as `configs/default.toml`.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../../../configs/default.toml");

/// Epoch budget of the `--fast` profile.
pub const FAST_EPOCHS: usize = 10;

/// Declarative domain shift; expanded into a [`DomainShift`] by seeding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub seed: u64,
    /// Givens angle scale of the domain rotation.
    #[serde(default)]
    pub rotation: f64,
    /// Log-normal sigma of per-dimension scales.
    #[serde(default)]
    pub scale_jitter: f64,
    /// Standard deviation of per-dimension biases.
    #[serde(default)]
    pub bias: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub occlusion_rate: f64,
    #[serde(default)]
    pub camera_sigma: f64,
}

impl ShiftConfig {
    pub fn expand(&self, input_dim: usize) -> DomainShift {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, 0x5C1E]));
        let scale = (0..input_dim)
            .map(|_| (self.scale_jitter * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        let bias = (0..input_dim)
            .map(|_| self.bias * rng.sample::<f64, _>(StandardNormal))
            .collect();
        DomainShift {
            rotation_seed: self.seed,
            rotation_strength: self.rotation,
            scale,
            bias,
            noise_sigma: self.noise_sigma,
            occlusion_rate: self.occlusion_rate,
            camera_sigma: self.camera_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub id: String,
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub n_cameras: usize,
    pub shift: ShiftConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub input_dim: usize,
    pub prototype_seed: u64,
    pub identity_dim: usize,
    pub identity_scale: f64,
    pub nuisance_scale: f64,
    pub domains: Vec<DomainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<DomainConfig>,
}

impl BenchmarkConfig {
    /// Expands into domain specs; identity ranges are assigned in order,
    /// labeled domains first, then the pool.
    pub fn to_benchmark(&self) -> Benchmark {
        let mut next = 0u64;
        let mut spec = |d: &DomainConfig| {
            let s = DomainSpec {
                domain_id: d.id.clone(),
                n_identities: d.n_identities,
                images_per_identity: d.images_per_identity,
                n_cameras: d.n_cameras,
                first_identity: next,
                shift: d.shift.expand(self.input_dim),
            };
            next += d.n_identities as u64;
            s
        };
        let domains = self.domains.iter().map(&mut spec).collect();
        let pool = self.pool.as_ref().map(spec);
        Benchmark {
            bank: PrototypeBank {
                seed: self.prototype_seed,
                input_dim: self.input_dim,
                identity_dim: self.identity_dim,
                identity_scale: self.identity_scale,
                nuisance_scale: self.nuisance_scale,
            },
            domains,
            pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProtocol", into = "RawProtocol")]
pub struct ProtocolConfig {
    pub mode: ProtocolMode,
    /// Held-out domains to evaluate; all domains when absent (leave-one-out)
    /// and required for a fixed split.
    pub held_out: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModeName {
    LeaveOneOut,
    FixedSplit,
}

/// On-disk form of [`ProtocolConfig`], flat so unknown keys are rejected.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProtocol {
    mode: ModeName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sources: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    held_out: Option<Vec<String>>,
}

impl TryFrom<RawProtocol> for ProtocolConfig {
    type Error = String;

    fn try_from(r: RawProtocol) -> std::result::Result<Self, String> {
        let mode = match (r.mode, r.sources) {
            (ModeName::LeaveOneOut, None) => ProtocolMode::LeaveOneOut,
            (ModeName::LeaveOneOut, Some(_)) => return Err("`sources` is only valid with mode = \"fixed_split\"".into()),
            (ModeName::FixedSplit, Some(sources)) => ProtocolMode::FixedSplit { sources },
            (ModeName::FixedSplit, None) => return Err("mode = \"fixed_split\" requires `sources`".into()),
        };
        Ok(Self {
            mode,
            held_out: r.held_out,
        })
    }
}

impl From<ProtocolConfig> for RawProtocol {
    fn from(p: ProtocolConfig) -> Self {
        let (mode, sources) = match p.mode {
            ProtocolMode::LeaveOneOut => (ModeName::LeaveOneOut, None),
            ProtocolMode::FixedSplit { sources } => (ModeName::FixedSplit, Some(sources)),
        };
        Self {
            mode,
            sources,
            held_out: p.held_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl ModelConfig {
    pub fn extractor(&self, input_dim: usize, seed: u64) -> ExtractorConfig {
        ExtractorConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            embed_dim: self.embed_dim,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochConfig {
    pub stage1: usize,
    pub stage2: usize,
}

impl Default for EpochConfig {
    fn default() -> Self {
        Self {
            stage1: 40,
            stage2: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    /// Probe/gallery split; 0 takes the first image of each
    /// (identity, camera) group as the probe.
    #[serde(default)]
    pub split_seed: u64,
    /// Fraction of the unlabeled pool used by sskd.
    #[serde(default = "one")]
    pub unlabeled_fraction: f64,
    #[serde(default)]
    pub epochs: EpochConfig,
    pub benchmark: BenchmarkConfig,
    pub protocol: ProtocolConfig,
    pub student: ModelConfig,
    pub teacher: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn one() -> f64 {
    1.0
}

/// Converts a byte offset into a 1-based line number.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub(crate) fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        msg: e.message().to_string(),
    })
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = parse_toml(text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn default_config() -> Self {
        Self::from_toml_str(DEFAULT_CONFIG_TOML, Path::new("configs/default.toml"))
            .expect("shipped default config is valid")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Shortens both stages to the CI epoch budget.
    pub fn apply_fast(&mut self) {
        self.epochs = EpochConfig {
            stage1: FAST_EPOCHS,
            stage2: FAST_EPOCHS,
        };
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.unlabeled_fraction) {
            return Err(Error::Config(format!(
                "unlabeled_fraction {} outside [0, 1]",
                self.unlabeled_fraction
            )));
        }
        self.train.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("train: {m}")),
            e => e,
        })?;
        let bench = self.benchmark.to_benchmark();
        bench.validate()?;
        let d = self.benchmark.input_dim;
        self.student.extractor(d, 0).validate().map_err(|e| Error::Config(format!("student: {e}")))?;
        self.teacher.extractor(d, 0).validate().map_err(|e| Error::Config(format!("teacher: {e}")))?;
        if self.method == Method::Sskd {
            match &bench.pool {
                None => {
                    return Err(Error::Config(
                        "method = \"sskd\" requires benchmark.pool (an unlabeled pool)".into(),
                    ))
                }
                Some(_) if self.train.batch.unlabeled_per_step == 0 => {
                    return Err(Error::Config(
                        "method = \"sskd\" requires train.batch.unlabeled_per_step > 0".into(),
                    ))
                }
                _ => {}
            }
        }
        for p in self.protocols()? {
            let ids: usize = p
                .sources
                .iter()
                .map(|s| bench.domain(s).map_or(0, |d| d.n_identities))
                .sum();
            if ids < self.train.batch.p_identities {
                return Err(Error::Config(format!(
                    "protocol {}: {} source identities < batch.p_identities {}",
                    p.name, ids, self.train.batch.p_identities
                )));
            }
        }
        Ok(())
    }

    /// Protocols evaluated by this config, in held-out order.
    pub fn protocols(&self) -> Result<Vec<ProtocolSpec>> {
        let bench = self.benchmark.to_benchmark();
        let pool = if self.method == Method::Sskd {
            bench.pool.as_ref().map(|p| p.domain_id.as_str())
        } else {
            None
        };
        let held: Vec<String> = match (&self.protocol.held_out, &self.protocol.mode) {
            (Some(h), _) => h.clone(),
            (None, ProtocolMode::LeaveOneOut) => {
                bench.domains.iter().map(|d| d.domain_id.clone()).collect()
            }
            (None, ProtocolMode::FixedSplit { .. }) => {
                return Err(Error::Config("a fixed split needs protocol.held_out".into()))
            }
        };
        if held.is_empty() {
            return Err(Error::Config("protocol.held_out must be non-empty".into()));
        }
        held.iter()
            .map(|h| build_protocol(&bench.domains, &self.protocol.mode, h, pool))
            .collect()
    }
}
