//! Experiment orchestration: run configuration, dataset manifests,
//! cross-validation plans, resumable plan execution, modality ablations and
//! the run-directory manifest.

mod config;
mod manifest;
mod plan;
mod run;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{AblationConfig, CrossvalConfig, EvalConfig, PhantomConfig, Protocol, RunConfig};
pub use manifest::{generate_phantom_dataset, DatasetEntry, DatasetManifest};
pub use plan::{fixed_split, partition, plan_loso_ensemble, plan_nested_kfold, plan_nested_loso, ExperimentPlan, Split};
pub use run::{
    run_ablation, run_plan, AblationReport, AblationRow, MemberFailure, MethodSummary, PlanOutcome, Variant,
};

use crate::fusion::FusionError;
use crate::metrics::MetricsError;
use crate::training::TrainError;
use crate::volio::VolumeError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("manifest {path}: line {line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("unknown case id {0:?}")]
    UnknownCase(String),
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("invalid variant {0:?}: {1}")]
    Variant(String, String),
    #[error("member {member}: {source}")]
    Member {
        member: String,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes `run_manifest.json`: the command, and every file under `dir`
/// (relative, sorted) except the manifest itself.
pub fn write_run_manifest(dir: &Path, command: &str, failures: &[String]) -> Result<(), HarnessError> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.retain(|f| f != "run_manifest.json");
    files.sort();
    let doc = serde_json::json!({
        "command": command,
        "files": files,
        "failures": failures,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    crate::volio::write_atomic(&dir.join("run_manifest.json"), text.as_bytes())?;
    Ok(())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
