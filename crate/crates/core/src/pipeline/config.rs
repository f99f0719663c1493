use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masking::RegionSet;
use crate::schedule::{ScheduleConfig, DEFAULT_ETA, DEFAULT_SAMPLING_STEPS};

pub use crate::backends::adapter::ADAPTER_ENV;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Toy,
    Adapter { address: String },
}

/// Everything that determines a batch run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Image files or directories of PNGs.
    pub inputs: Vec<PathBuf>,
    /// Global target image, used when no pairing entry applies.
    pub target: Option<PathBuf>,
    /// Optional `input_id target_path` pairing file.
    pub pairs: Option<PathBuf>,
    pub backend: BackendChoice,
    pub lambda: f64,
    pub eta: f64,
    pub schedule: ScheduleConfig,
    pub sampling_steps: usize,
    pub seed: u64,
    pub guidance_enabled: bool,
    pub keep_regions: RegionSet,
    pub composite_background: bool,
    pub dilation: usize,
    /// TOML label map; the built-in 19-label map when absent.
    pub label_map: Option<PathBuf>,
    /// TOML rectangle layout for the toy parser.
    pub parser_layout: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            target: None,
            pairs: None,
            backend: BackendChoice::Toy,
            lambda: crate::sampler::DEFAULT_LAMBDA,
            eta: DEFAULT_ETA,
            schedule: ScheduleConfig::default(),
            sampling_steps: DEFAULT_SAMPLING_STEPS,
            seed: 0,
            guidance_enabled: true,
            keep_regions: RegionSet::empty(),
            composite_background: true,
            dilation: 0,
            label_map: None,
            parser_layout: None,
            out_dir: PathBuf::from("anonymized"),
            workers: 1,
        }
    }
}

/// The fields that influence outputs; the hash is taken over these only.
#[derive(Serialize)]
struct HashedFields<'a> {
    inputs: &'a [PathBuf],
    target: &'a Option<PathBuf>,
    pairs: &'a Option<PathBuf>,
    backend: &'a BackendChoice,
    lambda: f64,
    eta: f64,
    schedule: &'a ScheduleConfig,
    sampling_steps: usize,
    seed: u64,
    guidance_enabled: bool,
    keep_regions: &'a RegionSet,
    composite_background: bool,
    dilation: usize,
    label_map: &'a Option<PathBuf>,
    parser_layout: &'a Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::invalid("no input images given"));
        }
        if self.target.is_none() && self.pairs.is_none() {
            return Err(Error::invalid(
                "a target image or a pairing file is required",
            ));
        }
        self.validate_params()
    }

    /// Numeric and schedule checks only; inputs and targets are not required.
    pub fn validate_params(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!(
                "eta must be >= 0, got {}",
                self.eta
            )));
        }
        if self.sampling_steps == 0 || self.sampling_steps > self.schedule.train_steps {
            return Err(Error::invalid(format!(
                "steps must lie in 1..={}, got {}",
                self.schedule.train_steps, self.sampling_steps
            )));
        }
        self.schedule.build()?;
        Ok(())
    }

    /// Hex SHA-256 over the output-relevant fields (not `out_dir`/`workers`).
    pub fn config_hash(&self) -> String {
        let fields = HashedFields {
            inputs: &self.inputs,
            target: &self.target,
            pairs: &self.pairs,
            backend: &self.backend,
            lambda: self.lambda,
            eta: self.eta,
            schedule: &self.schedule,
            sampling_steps: self.sampling_steps,
            seed: self.seed,
            guidance_enabled: self.guidance_enabled,
            keep_regions: &self.keep_regions,
            composite_background: self.composite_background,
            dilation: self.dilation,
            label_map: &self.label_map,
            parser_layout: &self.parser_layout,
        };
        let bytes = serde_json::to_vec(&fields).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-image seed: the batch seed mixed with a hash of the input id.
pub fn image_seed(base: u64, input_id: &str) -> u64 {
    let digest = Sha256::digest(input_id.as_bytes());
    let mut h = [0u8; 8];
    h.copy_from_slice(&digest[..8]);
    splitmix64(base ^ u64::from_le_bytes(h))
}
