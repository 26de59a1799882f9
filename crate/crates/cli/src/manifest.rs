//! The JSON manifest written next to every run's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::output::write_bytes;
use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn code_version() -> String {
    format!("keldysh {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    /// False for a trajectory cut short by a failure.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub label: String,
    pub path: String,
    pub step: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct JobRecord {
    pub name: String,
    pub kind: String,
    /// Resolved parameters of this job.
    pub params: Value,
    pub complete: bool,
    pub files: Vec<FileRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Per output file: conservation, H-theorem and similar checks.
    pub verdicts: BTreeMap<String, Value>,
    pub verify: Option<Value>,
    pub error: Option<String>,
}

impl JobRecord {
    pub fn file(&self, path: &str) -> Option<&FileRecord> {
        self.files.iter().find(|f| f.path == path)
    }

    pub fn set_file(&mut self, rec: FileRecord) {
        self.files.retain(|f| f.path != rec.path);
        self.files.push(rec);
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
    }

    pub fn set_checkpoint(&mut self, rec: CheckpointRecord) {
        self.checkpoints.retain(|c| c.label != rec.label);
        self.checkpoints.push(rec);
    }

    pub fn drop_checkpoint(&mut self, label: &str) {
        self.checkpoints.retain(|c| c.label != label);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub code_version: String,
    /// The job file exactly as given.
    pub config_text: String,
    /// Directory the job file's relative paths refer to.
    pub config_dir: PathBuf,
    /// Parsed parameter echo.
    pub config: Value,
    pub wall_time_s: f64,
    pub complete: bool,
    pub jobs: Vec<JobRecord>,
    pub error: Option<String>,
}

impl Manifest {
    pub fn job_mut(&mut self, name: &str) -> &mut JobRecord {
        let i = self.jobs.iter().position(|j| j.name == name).expect("job registered at start");
        &mut self.jobs[i]
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))?;
        write_bytes(&dir.join(MANIFEST_NAME), text.as_bytes()).map(|_| ())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
