use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use super::config::{image_seed, BackendChoice, RunConfig};
use super::io;
use super::manifest::{ImageRecord, RecordStatus, RunManifest};
use crate::backends::toy::{ParserLayout, ToyOptions};
use crate::backends::{Backend, Concurrency, Conditioning};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::grid::Grid;
use crate::masking::{apply_mask, build_mask, composite, FaceMask, LabelMap, ParseMap};
use crate::sampler::{Models, Sampler, SamplerConfig};
use crate::schedule::{NoiseSchedule, TimestepPlan};

/// Backend selected by the config. The toy backend shares the config's
/// noise schedule.
pub fn build_backend(config: &RunConfig) -> Result<Backend> {
    match &config.backend {
        BackendChoice::Toy => {
            let schedule = Arc::new(config.schedule.build()?);
            let mut options = ToyOptions::default();
            if let Some(path) = &config.parser_layout {
                options.layout = ParserLayout::from_toml(&std::fs::read_to_string(path)?)?;
            }
            Ok(Backend::toy(schedule, options))
        }
        BackendChoice::Adapter { address } => Backend::adapter(address),
    }
}

pub(crate) fn load_label_map(path: Option<&Path>) -> Result<LabelMap> {
    match path {
        Some(p) => LabelMap::from_toml(&std::fs::read_to_string(p)?),
        None => Ok(LabelMap::default()),
    }
}

/// `input_id target_path` per line; `#` starts a comment. Relative target
/// paths resolve against the pairing file's directory.
fn read_pairs(path: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut map = BTreeMap::new();
    for (n, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(id), Some(target), None) => {
                map.insert(id.to_string(), base.join(target));
            }
            _ => {
                return Err(Error::invalid(format!(
                    "{}:{}: expected `input_id target_path`",
                    path.display(),
                    n + 1
                )))
            }
        }
    }
    Ok(map)
}

/// Result of anonymizing one image.
#[derive(Debug, Clone)]
pub struct AnonymizedImage {
    pub pixels: Grid<u8>,
    pub parse: ParseMap,
    pub mask: FaceMask,
}

/// Per-run state shared by every image in a batch.
pub struct Anonymizer {
    backend: Backend,
    schedule: NoiseSchedule,
    plan: TimestepPlan,
    label_map: LabelMap,
    config: RunConfig,
}

impl Anonymizer {
    pub fn new(config: RunConfig, backend: Backend) -> Result<Self> {
        config.validate_params()?;
        let schedule = config.schedule.build()?;
        let plan = TimestepPlan::new(&schedule, config.sampling_steps, config.eta)?;
        let label_map = load_label_map(config.label_map.as_deref())?;
        label_map.validate()?;
        // surface unknown regions before touching any image
        config.keep_regions.resolve(&label_map)?;
        Ok(Self {
            backend,
            schedule,
            plan,
            label_map,
            config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// parse → mask → masked encode → guided sampling → decode → composite.
    pub fn anonymize(
        &self,
        input: &Grid<u8>,
        target: &Grid<u8>,
        seed: u64,
    ) -> Result<AnonymizedImage> {
        let s = input.shape();
        let target = io::resize_rgb(target, s.height, s.width)?;
        let x = io::to_unit(input);
        let x_tgt = io::to_unit(&target);

        let parse = self.backend.parser.parse(&x)?;
        let mask = build_mask(
            &parse,
            &self.config.keep_regions,
            &self.label_map,
            self.config.dilation,
        )?;
        let x_masked = apply_mask(&x, &mask)?;

        let codec = &self.backend.codec;
        let cond = Conditioning::new(codec.encode(&x_masked)?).with_mask(&mask);
        let z0 = codec.encode(&x)?;

        let sampler = Sampler {
            schedule: &self.schedule,
            plan: &self.plan,
            models: Models {
                denoiser: self.backend.denoiser.as_ref(),
                scorer: self.backend.scorer.as_ref(),
            },
            config: SamplerConfig {
                lambda: self.config.lambda,
                seed,
                guidance_enabled: self.config.guidance_enabled,
                ..Default::default()
            },
        };
        let z_hat = sampler.run(&z0, &cond, &x_tgt)?;
        let generated = io::to_pixels(&codec.decode(&z_hat)?);
        generated.ensure_shape(s)?;
        let pixels = if self.config.composite_background {
            composite(input, &generated, &mask)?
        } else {
            generated
        };
        Ok(AnonymizedImage {
            pixels,
            parse,
            mask,
        })
    }

    fn execution(&self) -> Execution {
        if self.backend.concurrency() == Concurrency::Serial {
            Execution::Sequential
        } else {
            Execution::with_workers(self.config.workers)
        }
    }
}

struct Job {
    id: String,
    input: PathBuf,
    target: Option<PathBuf>,
    duplicate: bool,
}

fn plan_jobs(config: &RunConfig) -> Result<Vec<Job>> {
    let pairs = config.pairs.as_deref().map(read_pairs).transpose()?;
    let mut seen = HashSet::new();
    Ok(io::expand_inputs(&config.inputs)?
        .into_iter()
        .map(|input| {
            let id = io::image_id(&input);
            let target = pairs
                .as_ref()
                .and_then(|p| p.get(&id).cloned())
                .or_else(|| config.target.clone());
            let duplicate = !seen.insert(id.clone());
            Job {
                id,
                input,
                target,
                duplicate,
            }
        })
        .collect())
}

/// Anonymize every input, writing `<out>/<id>.png` and `<out>/manifest.json`.
///
/// Per-image failures are recorded in the manifest and do not stop the batch.
pub fn cmd_anonymize(config: &RunConfig, backend: &Backend) -> Result<RunManifest> {
    config.validate()?;
    let anonymizer = Anonymizer::new(config.clone(), backend.clone())?;
    std::fs::create_dir_all(&config.out_dir)?;
    let jobs = plan_jobs(config)?;
    let hash = config.config_hash();
    let kept = config.keep_regions.to_vec();

    let records = exec::map(anonymizer.execution(), &jobs, |job| {
        let started = Instant::now();
        let seed = image_seed(config.seed, &job.id);
        let mut record = ImageRecord {
            input_id: job.id.clone(),
            input_path: job.input.clone(),
            target_id: job.target.as_deref().map(io::image_id),
            status: RecordStatus::Ok,
            error: None,
            seed,
            config_hash: hash.clone(),
            output_path: None,
            kept_regions: kept.clone(),
            editable_fraction: None,
            seconds: 0.0,
            metrics: None,
        };
        let outcome = (|| -> Result<(PathBuf, f64)> {
            if job.duplicate {
                return Err(Error::invalid(format!("duplicate input id `{}`", job.id)));
            }
            let target_path = job
                .target
                .as_deref()
                .ok_or_else(|| Error::invalid(format!("no target for `{}`", job.id)))?;
            let input = io::load_rgb(&job.input)?;
            let target = io::load_rgb(target_path)?;
            let out = anonymizer.anonymize(&input, &target, seed)?;
            let path = config.out_dir.join(format!("{}.png", job.id));
            io::save_rgb(&path, &out.pixels)?;
            Ok((path, out.mask.editable_fraction()))
        })();
        match outcome {
            Ok((path, fraction)) => {
                record.output_path = Some(path);
                record.editable_fraction = Some(fraction);
            }
            Err(e) => {
                log::error!("{}: {e}", job.id);
                record.status = RecordStatus::Error;
                record.error = Some(e.to_string());
            }
        }
        record.seconds = started.elapsed().as_secs_f64();
        record
    });

    let mut manifest = RunManifest::new(Some(config.clone()));
    manifest.records = records;
    manifest.write(&config.out_dir.join("manifest.json"))?;
    Ok(manifest)
}
