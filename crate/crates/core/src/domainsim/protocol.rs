use serde::{Deserialize, Serialize};

use super::DomainSpec;
use crate::error::{Error, Result};

/// How labeled sources are chosen for a held-out test domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ProtocolMode {
    /// Train on every other domain.
    LeaveOneOut,
    /// Train on the listed domains only.
    FixedSplit { sources: Vec<String> },
}

/// Named split of domains into labeled sources, an unlabeled pool, and
/// unseen test domains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub name: String,
    pub sources: Vec<String>,
    pub unlabeled: Option<String>,
    pub test: Vec<String>,
}

fn find<'a>(domains: &'a [DomainSpec], id: &str) -> Result<&'a DomainSpec> {
    domains
        .iter()
        .find(|d| d.domain_id == id)
        .ok_or_else(|| Error::Protocol(format!("domain {id} not found")))
}

pub fn build_protocol(
    domains: &[DomainSpec],
    mode: &ProtocolMode,
    held_out: &str,
    unlabeled: Option<&str>,
) -> Result<ProtocolSpec> {
    let test = find(domains, held_out)?;
    let sources: Vec<&DomainSpec> = match mode {
        ProtocolMode::LeaveOneOut => {
            if domains.len() < 2 {
                return Err(Error::Protocol(
                    "leave-one-out needs at least two domains".into(),
                ));
            }
            domains.iter().filter(|d| d.domain_id != held_out).collect()
        }
        ProtocolMode::FixedSplit { sources } => {
            if sources.is_empty() {
                return Err(Error::Protocol("fixed split needs at least one source".into()));
            }
            sources.iter().map(|s| find(domains, s)).collect::<Result<_>>()?
        }
    };
    for s in &sources {
        if s.domain_id == test.domain_id {
            return Err(Error::Protocol(format!("{held_out} is both source and test")));
        }
        let (a, b) = (s.identity_range(), test.identity_range());
        if a.start < b.end && b.start < a.end {
            return Err(Error::Protocol(format!(
                "identities of source {} overlap test domain {held_out}",
                s.domain_id
            )));
        }
    }
    if let Some(u) = unlabeled {
        if u == held_out {
            return Err(Error::Protocol("the test domain cannot be the unlabeled pool".into()));
        }
    }
    let names: Vec<String> = sources.iter().map(|d| d.domain_id.clone()).collect();
    let mut name = format!("{}->{held_out}", names.join("+"));
    if let Some(u) = unlabeled {
        name = format!("{}+{u}(u)->{held_out}", names.join("+"));
    }
    Ok(ProtocolSpec {
        name,
        sources: names,
        unlabeled: unlabeled.map(str::to_string),
        test: vec![held_out.to_string()],
    })
}

/// One protocol per domain, each holding that domain out.
pub fn leave_one_out_protocols(domains: &[DomainSpec], unlabeled: Option<&str>) -> Result<Vec<ProtocolSpec>> {
    domains
        .iter()
        .map(|d| build_protocol(domains, &ProtocolMode::LeaveOneOut, &d.domain_id, unlabeled))
        .collect()
}
