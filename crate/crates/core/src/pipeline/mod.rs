//! Batch pipeline behind the command-line tool: anonymize a set of images,
//! export masks, and evaluate anonymized outputs against the originals.

mod anonymize;
mod config;
mod evaluate;
pub mod io;
mod manifest;
mod mask;

pub use anonymize::{build_backend, cmd_anonymize, AnonymizedImage, Anonymizer};
pub use config::{image_seed, BackendChoice, RunConfig, ADAPTER_ENV};
pub use evaluate::{attach_report, cmd_evaluate, EvaluateOptions, MetricReport, PairMetrics};
pub use manifest::{ImageRecord, RecordStatus, RunManifest};
pub use mask::{cmd_mask, MaskArtifacts};
