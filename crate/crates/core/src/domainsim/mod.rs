//! Synthetic multi-domain re-identification data.
//!
//! Every identity owns a prototype in a low-dimensional identity subspace of
//! the input space. A sample is the prototype passed through its domain's
//! shift (partial rotation, per-dimension scale, bias), plus a per-camera
//! offset, plus structured Gaussian noise, with a random fraction of
//! coordinates zeroed. Identities are globally numbered and disjoint across
//! domains.

mod generate;
mod manifest;
mod protocol;

pub use generate::{
    generate_domain, generate_domain_with, generate_unlabeled_pool, generate_unlabeled_pool_with,
    Benchmark, BenchmarkData, PrototypeBank, SealedIdentities, UnlabeledPool,
};
pub use manifest::{read_manifest, write_manifest, ManifestRecord};
pub use protocol::{build_protocol, leave_one_out_protocols, ProtocolMode, ProtocolSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One feature vector with its annotations. Unlabeled records carry no
/// identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub features: Vec<f64>,
    pub identity: Option<u64>,
    pub camera: u32,
    pub domain: String,
}

/// Per-domain distortion of the shared prototype space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub rotation_seed: u64,
    /// Scales every Givens angle of the random rotation; 0 is no rotation.
    pub rotation_strength: f64,
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise_sigma: f64,
    /// Fraction of coordinates zeroed per sample.
    pub occlusion_rate: f64,
    /// Standard deviation of the per-camera additive offsets.
    pub camera_sigma: f64,
}

impl DomainShift {
    /// No distortion, no noise, no camera effect.
    pub fn identity(input_dim: usize) -> Self {
        Self {
            rotation_seed: 0,
            rotation_strength: 0.0,
            scale: vec![1.0; input_dim],
            bias: vec![0.0; input_dim],
            noise_sigma: 0.0,
            occlusion_rate: 0.0,
            camera_sigma: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.scale.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.len() != self.bias.len() {
            return Err(Error::Config(format!(
                "shift scale has {} entries, bias {}",
                self.scale.len(),
                self.bias.len()
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(Error::Config(format!("occlusion_rate {} outside [0, 1]", self.occlusion_rate)));
        }
        if !(self.camera_sigma >= 0.0 && self.camera_sigma.is_finite()) {
            return Err(Error::Config(format!("camera_sigma {} must be finite and >= 0", self.camera_sigma)));
        }
        if !self.rotation_strength.is_finite()
            || self.scale.iter().chain(&self.bias).any(|v| !v.is_finite())
        {
            return Err(Error::Config("shift parameters must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub n_cameras: usize,
    /// Global id of this domain's first identity.
    pub first_identity: u64,
    pub shift: DomainShift,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let ctx = |m: String| Error::Config(format!("domain {}: {m}", self.domain_id));
        if self.domain_id.is_empty() {
            return Err(Error::Config("domain_id must be non-empty".into()));
        }
        if self.n_identities < 2 {
            return Err(ctx(format!("n_identities {} < 2", self.n_identities)));
        }
        if self.images_per_identity < 2 {
            return Err(ctx(format!("images_per_identity {} < 2", self.images_per_identity)));
        }
        if self.n_cameras < 1 {
            return Err(ctx("n_cameras must be at least 1".into()));
        }
        self.shift.validate().map_err(|e| ctx(e.to_string()))
    }

    pub fn identity_range(&self) -> std::ops::Range<u64> {
        self.first_identity..self.first_identity + self.n_identities as u64
    }
}

/// Deterministic seed derivation, stable across platforms and releases.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        // splitmix64 finalizer
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// FNV-1a of a string, used to fold domain names into seeds.
pub(crate) fn str_seed(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}
