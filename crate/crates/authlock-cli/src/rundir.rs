//! Run directory layout and the small state files the commands share.
//!
//! ```text
//! runs/<run_id>/
//!   config.toml        resolved configuration as actually used
//!   run_state.json     pointers to the current checkpoint and trigger
//!   metrics.json       accumulated MetricsRecord list
//!   checkpoint/        parameter blobs + manifests + train log
//!   attacks/           one JSON report per attack mode, plus triggers
//!   certify/           certification.csv and summary.json
//!   report.md/.csv     rendered by the report command
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use authlock::analysis::MetricsRecord;
use authlock::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunState {
    /// Path of the current checkpoint manifest, relative to the run dir.
    pub checkpoint_manifest: String,
    /// Path of the hardware trigger spec, relative to the run dir.
    pub trigger_file: String,
    pub dataset_origin: String,
    pub hardened: bool,
}

pub fn state_path(run: &Path) -> PathBuf {
    run.join("run_state.json")
}

pub fn save_state(run: &Path, state: &RunState) -> Result<()> {
    let path = state_path(run);
    let text = serde_json::to_string_pretty(state).expect("state serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_state(run: &Path) -> Result<RunState> {
    let path = state_path(run);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::DataFormat(format!("run state: {e}")))
}

pub fn metrics_path(run: &Path) -> PathBuf {
    run.join("metrics.json")
}

pub fn load_metrics(run: &Path) -> Result<Vec<MetricsRecord>> {
    let path = metrics_path(run);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::DataFormat(format!("metrics: {e}")))
}

/// Adds or replaces metrics by name, keeping insertion order otherwise.
pub fn append_metrics(run: &Path, fresh: &[MetricsRecord]) -> Result<()> {
    let mut all = load_metrics(run)?;
    for rec in fresh {
        if let Some(slot) = all.iter_mut().find(|m| m.name == rec.name) {
            *slot = rec.clone();
        } else {
            all.push(rec.clone());
        }
    }
    let path = metrics_path(run);
    let text = serde_json::to_string_pretty(&all).expect("metrics serialize");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Creates the run directory skeleton. Refuses to reuse a directory that
/// already holds a run unless `force` is set.
pub fn create_run_dir(root: &Path, run_id: &str, force: bool) -> Result<PathBuf> {
    let run = root.join(run_id);
    if state_path(&run).exists() && !force {
        return Err(Error::invalid(format!(
            "{} already holds a run; pass --force to overwrite",
            run.display()
        )));
    }
    for sub in ["", "checkpoint", "attacks", "certify"] {
        let dir = run.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    Ok(run)
}

/// Opens an existing run directory, checking that implant has run.
pub fn open_run_dir(run: &Path) -> Result<RunState> {
    if !run.is_dir() {
        return Err(Error::invalid(format!(
            "{} is not a run directory",
            run.display()
        )));
    }
    load_state(run)
}
