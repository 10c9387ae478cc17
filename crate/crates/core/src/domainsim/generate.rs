use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mix_seed, str_seed, DomainSpec, SampleRecord};
use crate::error::{Error, Result};

/// Shared appearance space: an orthonormal basis split into an identity
/// subspace and a nuisance subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeBank {
    pub seed: u64,
    pub input_dim: usize,
    /// Dimensions that carry identity information.
    pub identity_dim: usize,
    /// Standard deviation of prototype coordinates in the identity subspace.
    pub identity_scale: f64,
    /// Noise standard deviation in the nuisance subspace relative to the
    /// identity subspace.
    pub nuisance_scale: f64,
}

impl PrototypeBank {
    pub fn new(seed: u64, input_dim: usize) -> Self {
        Self {
            seed,
            input_dim,
            identity_dim: (input_dim / 4).max(1),
            identity_scale: 1.0,
            nuisance_scale: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.identity_dim == 0 || self.identity_dim > self.input_dim {
            return Err(Error::Config(format!(
                "prototype bank needs 0 < identity_dim <= input_dim, got {} / {}",
                self.identity_dim, self.input_dim
            )));
        }
        if !(self.identity_scale > 0.0) || !(self.nuisance_scale >= 0.0) {
            return Err(Error::Config("prototype bank scales must be positive".into()));
        }
        Ok(())
    }

    /// Column-major orthonormal basis (`basis[c]` is column `c`).
    fn basis(&self) -> Vec<Vec<f64>> {
        let d = self.input_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, 0xBA515]));
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
        while cols.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-8 {
                v.iter_mut().for_each(|x| *x /= n);
                cols.push(v);
            }
        }
        cols
    }
}

/// Precomputed bank basis.
struct Space<'a> {
    bank: &'a PrototypeBank,
    basis: Vec<Vec<f64>>,
}

impl<'a> Space<'a> {
    fn new(bank: &'a PrototypeBank) -> Self {
        Self {
            bank,
            basis: bank.basis(),
        }
    }

    fn combine(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.bank.input_dim];
        for (c, &a) in self.basis.iter().zip(coeffs) {
            out.iter_mut().zip(c).for_each(|(o, b)| *o += a * b);
        }
        out
    }

    fn prototype(&self, identity: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.bank.seed, 0x9407, identity]));
        let z: Vec<f64> = (0..self.bank.identity_dim)
            .map(|_| self.bank.identity_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.combine(&z)
    }

    /// Unit-sigma structured noise: 1 in the identity subspace,
    /// `nuisance_scale` in the rest.
    fn noise<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let coeffs: Vec<f64> = (0..self.bank.input_dim)
            .map(|i| {
                let s = if i < self.bank.identity_dim { 1.0 } else { self.bank.nuisance_scale };
                s * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        self.combine(&coeffs)
    }
}

/// Dense rotation built from random Givens rotations with angles scaled by
/// `strength`; the identity matrix when `strength == 0`.
fn rotation(dim: usize, seed: u64, strength: f64) -> Vec<Vec<f64>> {
    let mut r: Vec<Vec<f64>> = (0..dim)
        .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    if strength == 0.0 || dim < 2 {
        return r;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x2074]));
    for _ in 0..4 * dim {
        let i = rng.random_range(0..dim);
        let mut j = rng.random_range(0..dim - 1);
        if j >= i {
            j += 1;
        }
        let theta = strength * rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let (s, c) = theta.sin_cos();
        for row in r.iter_mut() {
            let (a, b) = (row[i], row[j]);
            row[i] = c * a - s * b;
            row[j] = s * a + c * b;
        }
    }
    r
}

fn generate(spec: &DomainSpec, space: &Space<'_>, labeled: bool) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let d = space.bank.input_dim;
    let sh = &spec.shift;
    if sh.input_dim() != d {
        return Err(Error::Config(format!(
            "domain {}: shift has dimension {}, bank {d}",
            spec.domain_id,
            sh.input_dim()
        )));
    }
    let dom = str_seed(&spec.domain_id);
    let rot = rotation(d, sh.rotation_seed, sh.rotation_strength);
    let cams: Vec<Vec<f64>> = (0..spec.n_cameras)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[sh.rotation_seed, dom, 0xCA3, c as u64]));
            (0..d).map(|_| sh.camera_sigma * rng.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    let n_occluded = (sh.occlusion_rate * d as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[space.bank.seed, sh.rotation_seed, dom, 0x5A3]));

    let mut out = Vec::with_capacity(spec.n_identities * spec.images_per_identity);
    for i in 0..spec.n_identities {
        let gid = spec.first_identity + i as u64;
        let p = space.prototype(gid);
        let shifted: Vec<f64> = rot
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let v: f64 = row.iter().zip(&p).map(|(a, b)| a * b).sum();
                sh.scale[r] * v + sh.bias[r]
            })
            .collect();
        for j in 0..spec.images_per_identity {
            let camera = (i + j) % spec.n_cameras;
            let noise = space.noise(&mut rng);
            let mut x: Vec<f64> = (0..d)
                .map(|k| shifted[k] + cams[camera][k] + sh.noise_sigma * noise[k])
                .collect();
            if n_occluded > 0 {
                for k in rand::seq::index::sample(&mut rng, d, n_occluded) {
                    x[k] = 0.0;
                }
            }
            out.push(SampleRecord {
                features: x,
                identity: labeled.then_some(gid),
                camera: camera as u32,
                domain: spec.domain_id.clone(),
            });
        }
    }
    Ok(out)
}

/// Labeled records of one domain, identity-major, using a bank with
/// default geometry for `spec`'s dimension.
pub fn generate_domain(spec: &DomainSpec, prototype_bank_seed: u64) -> Result<Vec<SampleRecord>> {
    let bank = PrototypeBank::new(prototype_bank_seed, spec.shift.input_dim());
    generate_domain_with(spec, &bank)
}

pub fn generate_domain_with(spec: &DomainSpec, bank: &PrototypeBank) -> Result<Vec<SampleRecord>> {
    bank.validate()?;
    generate(spec, &Space::new(bank), true)
}

/// Unlabeled pool records. Ground-truth identities are returned separately
/// for diagnostics; nothing in training accepts them.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledPool {
    pub domain: String,
    pub records: Vec<SampleRecord>,
}

impl UnlabeledPool {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Deterministic nested subsample: the first `round(fraction · n)` rows
    /// of a seeded permutation.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<UnlabeledPool> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("unlabeled fraction {fraction} outside [0, 1]")));
        }
        let n = self.records.len();
        let keep = (fraction * n as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xF2AC]));
        let mut order = rand::seq::index::sample(&mut rng, n, n).into_vec();
        order.truncate(keep);
        order.sort_unstable();
        Ok(UnlabeledPool {
            domain: self.domain.clone(),
            records: order.into_iter().map(|i| self.records[i].clone()).collect(),
        })
    }
}

/// Hidden ground truth of an unlabeled pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SealedIdentities {
    pub domain: String,
    identities: Vec<u64>,
}

impl SealedIdentities {
    /// For diagnostics only.
    pub fn identities(&self) -> &[u64] {
        &self.identities
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

pub fn generate_unlabeled_pool(spec: &DomainSpec, seed: u64) -> Result<(UnlabeledPool, SealedIdentities)> {
    let bank = PrototypeBank::new(seed, spec.shift.input_dim());
    generate_unlabeled_pool_with(spec, &bank)
}

pub fn generate_unlabeled_pool_with(
    spec: &DomainSpec,
    bank: &PrototypeBank,
) -> Result<(UnlabeledPool, SealedIdentities)> {
    let mut records = generate_domain_with(spec, bank)?;
    let identities = records.iter_mut().map(|r| r.identity.take().unwrap()).collect();
    Ok((
        UnlabeledPool {
            domain: spec.domain_id.clone(),
            records,
        },
        SealedIdentities {
            domain: spec.domain_id.clone(),
            identities,
        },
    ))
}

/// Labeled domains plus an optional unlabeled pool over one bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub bank: PrototypeBank,
    pub domains: Vec<DomainSpec>,
    pub pool: Option<DomainSpec>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkData {
    pub domains: BTreeMap<String, Vec<SampleRecord>>,
    pub pool: Option<UnlabeledPool>,
    pub sealed: Option<SealedIdentities>,
}

impl Benchmark {
    pub fn validate(&self) -> Result<()> {
        self.bank.validate()?;
        let mut seen: Vec<(&str, std::ops::Range<u64>)> = Vec::new();
        for spec in self.domains.iter().chain(self.pool.iter()) {
            spec.validate()?;
            if spec.shift.input_dim() != self.bank.input_dim {
                return Err(Error::Config(format!(
                    "domain {}: shift dimension {} != input_dim {}",
                    spec.domain_id,
                    spec.shift.input_dim(),
                    self.bank.input_dim
                )));
            }
            let r = spec.identity_range();
            for (name, other) in &seen {
                if *name == spec.domain_id {
                    return Err(Error::Config(format!("duplicate domain id {name}")));
                }
                if r.start < other.end && other.start < r.end {
                    return Err(Error::Config(format!(
                        "identity ranges of {} and {name} overlap",
                        spec.domain_id
                    )));
                }
            }
            seen.push((&spec.domain_id, r));
        }
        Ok(())
    }

    pub fn domain(&self, id: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.domain_id == id)
    }

    pub fn generate(&self) -> Result<BenchmarkData> {
        self.validate()?;
        let space = Space::new(&self.bank);
        let domains = self
            .domains
            .par_iter()
            .map(|s| generate(s, &space, true).map(|r| (s.domain_id.clone(), r)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let (pool, sealed) = match &self.pool {
            Some(spec) => {
                let (p, s) = generate_unlabeled_pool_with(spec, &self.bank)?;
                (Some(p), Some(s))
            }
            None => (None, None),
        };
        Ok(BenchmarkData {
            domains,
            pool,
            sealed,
        })
    }
}
