//! Re-identification retrieval metrics.
//!
//! Distances are cosine distances between L2-normalized embeddings. For each
//! probe the gallery is sorted by distance (ties by gallery index); gallery
//! items that share both identity and camera with the probe are removed
//! when same-camera filtering is on. CMC rank-k records whether the first
//! true match falls in the top k; AP is the non-interpolated mean of the
//! precision at each true match.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::domainsim::{mix_seed, BenchmarkData, ProtocolSpec, SampleRecord};
use crate::error::{Error, Result};
use crate::model::{normalize, Model};

/// CMC cut-offs reported in every result.
pub const RANKS: [usize; 3] = [1, 5, 10];

/// Normalized embeddings with identity and camera annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    embeddings: Vec<Vec<f64>>,
    identity: Vec<u64>,
    camera: Vec<u32>,
}

pub type GallerySet = EmbeddingSet;
pub type ProbeSet = EmbeddingSet;

impl EmbeddingSet {
    /// Normalizes every row; rows must be non-zero and equally long.
    pub fn new(embeddings: Vec<Vec<f64>>, identity: Vec<u64>, camera: Vec<u32>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::Eval("embedding set must be non-empty".into()));
        }
        if identity.len() != embeddings.len() || camera.len() != embeddings.len() {
            return Err(Error::shape(
                "embedding set",
                format!(
                    "{} rows, {} identities, {} cameras",
                    embeddings.len(),
                    identity.len(),
                    camera.len()
                ),
            ));
        }
        let dim = embeddings[0].len();
        let embeddings = embeddings
            .iter()
            .map(|e| {
                if e.len() != dim {
                    return Err(Error::shape("embedding set", "ragged rows"));
                }
                normalize(e)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            embeddings,
            identity,
            camera,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn identities(&self) -> &[u64] {
        &self.identity
    }

    pub fn cameras(&self) -> &[u32] {
        &self.camera
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// k → fraction of evaluated probes whose first match is within top k.
    pub rank_k: BTreeMap<usize, f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// AP of each evaluated probe, in probe order.
    pub per_query_ap: Vec<f64>,
    pub num_queries: usize,
    /// Probes without any valid gallery match.
    pub skipped: usize,
}

impl EvalResult {
    pub fn rank1(&self) -> f64 {
        self.rank_k[&1]
    }
}

/// `P × G` cosine distances `1 − ⟨p, g⟩`, clamped to `[0, 2]`.
pub fn distance_matrix(probe: &ProbeSet, gallery: &GallerySet) -> Result<Vec<Vec<f64>>> {
    if probe.dim() != gallery.dim() {
        return Err(Error::shape(
            "distance_matrix",
            format!("probe dim {} vs gallery dim {}", probe.dim(), gallery.dim()),
        ));
    }
    Ok(probe
        .embeddings
        .par_iter()
        .map(|p| {
            gallery
                .embeddings
                .iter()
                .map(|g| {
                    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                    (1.0 - dot).clamp(0.0, 2.0)
                })
                .collect()
        })
        .collect())
}

/// `(first-match rank, AP)` for one probe, or `None` without valid matches.
fn score_query(
    dist: &[f64],
    pid: u64,
    pcam: u32,
    gallery: &GallerySet,
    filter_same_camera: bool,
) -> Option<(usize, f64)> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let mut pos = 0usize;
    let mut hits = 0usize;
    let mut first = None;
    let mut precision_sum = 0.0;
    for g in order {
        let same_id = gallery.identity[g] == pid;
        if filter_same_camera && same_id && gallery.camera[g] == pcam {
            continue;
        }
        pos += 1;
        if same_id {
            hits += 1;
            first.get_or_insert(pos);
            precision_sum += hits as f64 / pos as f64;
        }
    }
    first.map(|r| (r, precision_sum / hits as f64))
}

pub fn evaluate(probe: &ProbeSet, gallery: &GallerySet, filter_same_camera: bool) -> Result<EvalResult> {
    let dist = distance_matrix(probe, gallery)?;
    let scored: Vec<Option<(usize, f64)>> = dist
        .par_iter()
        .enumerate()
        .map(|(q, row)| score_query(row, probe.identity[q], probe.camera[q], gallery, filter_same_camera))
        .collect();
    let valid: Vec<(usize, f64)> = scored.iter().flatten().copied().collect();
    let skipped = scored.len() - valid.len();
    if valid.is_empty() {
        return Err(Error::Eval(format!(
            "none of {} probes has a valid gallery match",
            scored.len()
        )));
    }
    let n = valid.len() as f64;
    let rank_k = RANKS
        .iter()
        .map(|&k| (k, valid.iter().filter(|(r, _)| *r <= k).count() as f64 / n))
        .collect();
    let per_query_ap: Vec<f64> = valid.iter().map(|&(_, ap)| ap).collect();
    let map = per_query_ap.iter().sum::<f64>() / n;
    Ok(EvalResult {
        rank_k,
        map,
        per_query_ap,
        num_queries: valid.len(),
        skipped,
    })
}

/// Splits record indices into probe and gallery: within each
/// (identity, camera) group the first image is the probe and the rest go to
/// the gallery. `split_seed == 0` keeps record order; any other seed shuffles
/// each group first.
pub fn split_probe_gallery(records: &[SampleRecord], split_seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut groups: BTreeMap<(u64, u32), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let id = r
            .identity
            .ok_or_else(|| Error::Eval(format!("test record {i} has no identity")))?;
        groups.entry((id, r.camera)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[split_seed, 0x5911]));
    let (mut probe, mut gallery) = (Vec::new(), Vec::new());
    for members in groups.values() {
        let order = if split_seed == 0 {
            (0..members.len()).collect()
        } else {
            rand::seq::index::sample(&mut rng, members.len(), members.len()).into_vec()
        };
        let mut it = order.into_iter().map(|j| members[j]);
        probe.extend(it.next());
        gallery.extend(it);
    }
    gallery.sort_unstable();
    Ok((probe, gallery))
}

const EMBED_CHUNK: usize = 512;

/// Embeds records with `model`'s extractor, in record order.
pub fn embed_records(model: &Model, records: &[SampleRecord], rows: &[usize]) -> Result<EmbeddingSet> {
    let d = model.config().input_dim;
    let mut embeddings = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EMBED_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * d);
        for &i in chunk {
            if records[i].features.len() != d {
                return Err(Error::shape(
                    "embed",
                    format!("record has {} features, model expects {d}", records[i].features.len()),
                ));
            }
            data.extend_from_slice(&records[i].features);
        }
        let e = model.embed(&Tensor::matrix(chunk.len(), d, data)?)?;
        embeddings.extend((0..chunk.len()).map(|r| e.row(r).to_vec()));
    }
    EmbeddingSet::new(
        embeddings,
        rows.iter().map(|&i| records[i].identity.unwrap_or(u64::MAX)).collect(),
        rows.iter().map(|&i| records[i].camera).collect(),
    )
}

/// Evaluates `model` on every test domain of `protocol`.
pub fn run_protocol(
    protocol: &ProtocolSpec,
    model: &Model,
    data: &BenchmarkData,
    split_seed: u64,
) -> Result<Vec<(String, EvalResult)>> {
    protocol
        .test
        .iter()
        .map(|name| {
            let records = data
                .domains
                .get(name)
                .ok_or_else(|| Error::Protocol(format!("test domain {name} not generated")))?;
            if records.is_empty() {
                return Err(Error::Eval(format!("test domain {name} is empty")));
            }
            let (p, g) = split_probe_gallery(records, split_seed)?;
            if g.is_empty() {
                return Err(Error::Eval(format!("test domain {name} has an empty gallery")));
            }
            let probe = embed_records(model, records, &p)?;
            let gallery = embed_records(model, records, &g)?;
            Ok((name.clone(), evaluate(&probe, &gallery, true)?))
        })
        .collect()
}

/// Identity → count of gallery items, handy for chance-level estimates.
pub fn gallery_identity_counts(gallery: &GallerySet) -> HashMap<u64, usize> {
    let mut m = HashMap::new();
    for &id in &gallery.identity {
        *m.entry(id).or_insert(0) += 1;
    }
    m
}
