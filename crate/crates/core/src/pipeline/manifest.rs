use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::evaluate::{MetricReport, PairMetrics};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    Error,
}

/// One input image's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub input_id: String,
    pub input_path: PathBuf,
    pub target_id: Option<String>,
    pub status: RecordStatus,
    pub error: Option<String>,
    pub seed: u64,
    pub config_hash: String,
    pub output_path: Option<PathBuf>,
    pub kept_regions: Vec<String>,
    pub editable_fraction: Option<f64>,
    pub seconds: f64,
    pub metrics: Option<PairMetrics>,
}

/// Record of one batch, written as pretty JSON with a fixed field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_hash: Option<String>,
    pub config: Option<RunConfig>,
    pub records: Vec<ImageRecord>,
    pub evaluation: Option<MetricReport>,
}

impl RunManifest {
    pub fn new(config: Option<RunConfig>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.as_ref().map(RunConfig::config_hash),
            config,
            records: Vec::new(),
            evaluation: None,
        }
    }

    pub fn all_ok(&self) -> bool {
        self.records.iter().all(|r| r.status == RecordStatus::Ok)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records
            .iter()
            .filter(|r| r.status == RecordStatus::Error)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
