//! Line-delimited JSON manifests.
//!
//! One record per line:
//!
//! ```text
//! {"features": [0.1, -0.3, ...], "identity": 17, "camera": 2, "domain": "market"}
//! {"path": "feats/000123.json", "identity": null, "camera": 0, "domain": "pool"}
//! ```
//!
//! `path` is resolved relative to the manifest and must hold a JSON array
//! or whitespace-separated numbers. Blank lines are skipped.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SampleRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub identity: Option<u64>,
    pub camera: u32,
    pub domain: String,
}

fn read_feature_file(path: &Path) -> std::result::Result<Vec<f64>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(|e| format!("{}: {e}", path.display()))
    } else {
        trimmed
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| format!("{}: {t:?}: {e}", path.display())))
            .collect()
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let features = match (rec.features, rec.path) {
            (Some(f), None) => f,
            (None, Some(p)) => read_feature_file(&base.join(p)).map_err(|m| parse_err(lineno, m))?,
            _ => return Err(parse_err(lineno, "exactly one of `features` or `path` is required".into())),
        };
        if features.is_empty() || features.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(lineno, "features must be non-empty and finite".into()));
        }
        match dim {
            Some(d) if d != features.len() => {
                return Err(parse_err(
                    lineno,
                    format!("expected {d} features, found {}", features.len()),
                ))
            }
            _ => dim = Some(features.len()),
        }
        out.push(SampleRecord {
            features,
            identity: rec.identity,
            camera: rec.camera,
            domain: rec.domain,
        });
    }
    Ok(out)
}

/// Writes records with inline features.
pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        let m = ManifestRecord {
            features: Some(r.features.clone()),
            path: None,
            identity: r.identity,
            camera: r.camera,
            domain: r.domain.clone(),
        };
        buf.push_str(&serde_json::to_string(&m)?);
        buf.push('\n');
    }
    crate::io::write_atomic(path, buf.as_bytes())
}
