use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use episodic_metric::Result;

use crate::job::Job;

/// Record of one command invocation, written to `manifest.json` before the
/// job starts and rewritten with the finish time when it succeeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Version of the code that ran the job.
    pub version: String,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub job: Job,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(job: Job, out: PathBuf) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: job.seed(),
            out,
            started_unix: unix_now(),
            finished_unix: None,
            job,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}
