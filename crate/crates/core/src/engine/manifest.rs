//! The run manifest: everything needed to resume, replay and analyse a run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{iteration_dir, RunConfig};
use crate::analysis::LearningCurve;
use crate::error::{Error, Result};
use crate::modelio::{LedgerSnapshot, StudentState};
use crate::util::sha256_hex;

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftwareStamp {
    pub name: String,
    pub version: String,
}

impl SoftwareStamp {
    pub fn current() -> Self {
        SoftwareStamp {
            name: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStamp {
    /// Path relative to the run directory.
    pub file: String,
    pub sha256: String,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub std_err: f64,
}

/// One completed pass of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub t: u32,
    pub selected_ids: Vec<String>,
    pub accepted: usize,
    pub attempted: usize,
    /// Size of the accumulated synthetic training set after this iteration.
    pub training_size: usize,
    pub student: StudentState,
    pub accuracy: f64,
    pub std_err: f64,
    #[serde(default)]
    pub budget_exhausted: bool,
    /// Cumulative ledger totals at the end of the iteration.
    pub ledger: LedgerSnapshot,
    /// Artifact file name to SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicateStatus {
    Pending,
    Running,
    Complete,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub seed: u64,
    pub status: ReplicateStatus,
    #[serde(default)]
    pub stop_reason: Option<String>,
    /// Test accuracy of the untrained student.
    #[serde(default)]
    pub baseline: Option<EvalSummary>,
    pub iterations: Vec<IterationState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    pub config_hash: String,
    pub name: String,
    pub dataset_label: String,
    pub iterations: u32,
    pub software: SoftwareStamp,
    pub corpora: BTreeMap<String, CorpusStamp>,
    pub replicates: Vec<ReplicateRecord>,
    pub ledger: LedgerSnapshot,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, corpora: BTreeMap<String, CorpusStamp>) -> Self {
        RunManifest {
            format: MANIFEST_FORMAT,
            config_hash: cfg.hash(),
            name: cfg.name.clone(),
            dataset_label: cfg.dataset_label.clone(),
            iterations: cfg.iterations,
            software: SoftwareStamp::current(),
            corpora,
            replicates: cfg
                .seeds
                .iter()
                .map(|&seed| ReplicateRecord {
                    seed,
                    status: ReplicateStatus::Pending,
                    stop_reason: None,
                    baseline: None,
                    iterations: Vec::new(),
                })
                .collect(),
            ledger: LedgerSnapshot::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Integrity(format!(
                "{}: unsupported manifest format {}",
                path.display(),
                m.format
            )));
        }
        m.check_consistency()?;
        Ok(m)
    }

    fn check_consistency(&self) -> Result<()> {
        for r in &self.replicates {
            let mut prev = 0usize;
            for (k, it) in r.iterations.iter().enumerate() {
                if it.t != k as u32 + 1 {
                    return Err(Error::Integrity(format!(
                        "replicate {}: iteration {} recorded at position {}",
                        r.seed,
                        it.t,
                        k + 1
                    )));
                }
                if it.training_size != prev + it.accepted {
                    return Err(Error::Integrity(format!(
                        "replicate {} iteration {}: training size {} != {} + {}",
                        r.seed, it.t, it.training_size, prev, it.accepted
                    )));
                }
                if !(0.0..=1.0).contains(&it.accuracy) {
                    return Err(Error::Integrity(format!(
                        "replicate {} iteration {}: accuracy {} outside [0, 1]",
                        r.seed, it.t, it.accuracy
                    )));
                }
                prev = it.training_size;
            }
            if r.status == ReplicateStatus::Complete && r.iterations.len() as u32 != self.iterations
            {
                return Err(Error::Integrity(format!(
                    "replicate {} is marked complete with {} of {} iterations",
                    r.seed,
                    r.iterations.len(),
                    self.iterations
                )));
            }
        }
        Ok(())
    }

    /// Re-hashes every recorded artifact under `out`.
    pub fn verify_artifacts(&self, out: &Path) -> Result<()> {
        for (name, stamp) in &self.corpora {
            let path = out.join(&stamp.file);
            let bytes = std::fs::read(&path).map_err(|_| {
                Error::Integrity(format!("{name} corpus {} is missing", path.display()))
            })?;
            if sha256_hex(&bytes) != stamp.sha256 {
                return Err(Error::Integrity(format!(
                    "{name} corpus {} was modified",
                    path.display()
                )));
            }
        }
        for r in &self.replicates {
            for it in &r.iterations {
                let dir = iteration_dir(out, r.seed, it.t);
                for (file, sha) in &it.artifacts {
                    let path = dir.join(file);
                    let bytes = std::fs::read(&path).map_err(|_| {
                        Error::Integrity(format!(
                            "replicate {} iteration {}: missing artifact {}",
                            r.seed,
                            it.t,
                            path.display()
                        ))
                    })?;
                    if &sha256_hex(&bytes) != sha {
                        return Err(Error::Integrity(format!(
                            "replicate {} iteration {}: artifact {} was modified",
                            r.seed,
                            it.t,
                            path.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.replicates
            .iter()
            .all(|r| r.status == ReplicateStatus::Complete)
    }

    pub fn stopped_on_budget(&self) -> bool {
        self.replicates
            .iter()
            .any(|r| r.status == ReplicateStatus::BudgetExhausted)
    }

    /// Test accuracy against training-set size, averaged over the replicates
    /// that reached each size. The untrained student contributes size 0.
    pub fn learning_curve(&self) -> Result<LearningCurve> {
        let runs: Vec<Vec<(usize, f64)>> = self
            .replicates
            .iter()
            .map(|r| {
                r.baseline
                    .iter()
                    .map(|b| (0, b.accuracy))
                    .chain(
                        r.iterations
                            .iter()
                            .map(|it| (it.training_size, it.accuracy)),
                    )
                    .collect()
            })
            .collect();
        LearningCurve::pooled(self.name.clone(), &runs)
    }
}
