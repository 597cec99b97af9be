//! On-disk records: ensemble manifests and certificates. Every file carries
//! the configuration hash and master seed it came from.

use std::path::Path;

use anyhow::{bail, Context, Result};
use knode_mpc::certify::CertificationReport;
use knode_mpc::net::MlpCheckpoint;
use knode_mpc::MlpParams;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::{PlantKind, WeightConstraint};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemberRecord {
    pub width: usize,
    pub seed: u64,
    /// Lowest training loss reached; the stored parameters attain it.
    pub train_loss: f64,
    pub validation_loss: f64,
    pub checkpoint: MlpCheckpoint,
}

/// A member whose training diverged; it is left out of the ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailedMember {
    pub index: usize,
    pub width: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightRecord {
    pub constraint: WeightConstraint,
    pub equal: Vec<f64>,
    pub optimized: Vec<f64>,
    /// Hold-out losses of the two weightings.
    pub equal_loss: f64,
    pub optimized_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub provenance: Provenance,
    pub plant: PlantKind,
    pub dt: f64,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub members: Vec<MemberRecord>,
    pub failed: Vec<FailedMember>,
    pub weights: WeightRecord,
}

impl EnsembleManifest {
    pub fn member_params(&self) -> Result<Vec<MlpParams>> {
        self.members
            .iter()
            .map(|m| MlpParams::try_from(m.checkpoint.clone()).context("member checkpoint"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.members.len();
        if l == 0 {
            bail!("manifest has no members");
        }
        if self.weights.equal.len() != l || self.weights.optimized.len() != l {
            bail!("manifest weights do not match its {l} members");
        }
        self.member_params()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub provenance: Provenance,
    pub plant: PlantKind,
    pub model: String,
    pub rho: f64,
    /// Terminal weight `P`, row-major.
    pub p: Vec<Vec<f64>>,
    /// Local gain `K`, row-major.
    pub k: Vec<Vec<f64>>,
    pub lyapunov_residual: f64,
    pub passed: bool,
    pub report: CertificationReport,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}
