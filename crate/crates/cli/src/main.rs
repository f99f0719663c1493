use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use faceanon::backends::adapter::serve;
use faceanon::backends::toy::{ParserLayout, ToyOptions};
use faceanon::backends::Backend;
use faceanon::exec::Execution;
use faceanon::masking::{LabelMap, RegionSet};
use faceanon::metrics::DEFAULT_REID_THRESHOLD;
use faceanon::pipeline::{
    attach_report, build_backend, cmd_anonymize, cmd_evaluate, cmd_mask, BackendChoice,
    EvaluateOptions, RunConfig, ADAPTER_ENV,
};
use faceanon::schedule::{
    ScheduleConfig, DEFAULT_ETA, DEFAULT_SAMPLING_STEPS, DEFAULT_TRAIN_STEPS,
};

#[derive(Parser)]
#[command(
    name = "faceanon",
    version,
    about = "Face anonymization by guided diffusion inpainting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Anonymize images and write outputs plus a manifest.
    Anonymize(AnonymizeArgs),
    /// Write the parse map and editable mask of one image.
    Mask(MaskArgs),
    /// Compare anonymized images with their originals.
    Evaluate(EvaluateArgs),
    /// Serve the toy backend over the adapter protocol.
    ServeToy(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Toy,
    Adapter,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "toy")]
    backend: BackendKind,
    /// Adapter address (host:port).
    #[arg(long, env = ADAPTER_ENV)]
    adapter: Option<String>,
    /// TOML rectangle layout for the toy parser.
    #[arg(long)]
    parser_layout: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TRAIN_STEPS)]
    train_steps: usize,
}

impl BackendArgs {
    fn choice(&self) -> Result<BackendChoice> {
        Ok(match self.backend {
            BackendKind::Toy => BackendChoice::Toy,
            BackendKind::Adapter => BackendChoice::Adapter {
                address: self
                    .adapter
                    .clone()
                    .with_context(|| format!("--adapter or {ADAPTER_ENV} is required"))?,
            },
        })
    }

    fn run_config(&self) -> Result<RunConfig> {
        Ok(RunConfig {
            backend: self.choice()?,
            schedule: ScheduleConfig {
                train_steps: self.train_steps,
                ..Default::default()
            },
            parser_layout: self.parser_layout.clone(),
            ..Default::default()
        })
    }

    fn build(&self) -> Result<Backend> {
        Ok(build_backend(&self.run_config()?)?)
    }
}

#[derive(Args)]
struct AnonymizeArgs {
    /// Input PNG files or directories.
    #[arg(long = "input", short, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Target image used for every input without a pairing entry.
    #[arg(long, short)]
    target: Option<PathBuf>,
    /// File with `input_id target_path` lines.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, default_value_t = faceanon::sampler::DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = DEFAULT_ETA)]
    eta: f64,
    /// Number of reverse sampling steps.
    #[arg(long, default_value_t = DEFAULT_SAMPLING_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_guidance: bool,
    /// Comma-separated regions to keep (eyes, lips, nose, eyebrows).
    #[arg(long, default_value = "")]
    keep_regions: RegionSet,
    /// Write raw decoder output instead of pasting it into the input.
    #[arg(long)]
    no_composite: bool,
    #[arg(long, default_value_t = 0)]
    dilate: usize,
    #[arg(long)]
    label_map: Option<PathBuf>,
    #[arg(long, short, default_value = "anonymized")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, default_value = "")]
    keep_regions: RegionSet,
    #[arg(long)]
    label_map: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    dilate: usize,
    #[arg(long, short, default_value = "masks")]
    out: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    originals: PathBuf,
    #[arg(long)]
    anonymized: PathBuf,
    /// Cosine similarity above which a pair counts as re-identified.
    #[arg(long, default_value_t = DEFAULT_REID_THRESHOLD)]
    threshold: f64,
    /// Manifest to update; defaults to `<anonymized>/manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    #[arg(long, default_value_t = DEFAULT_TRAIN_STEPS)]
    train_steps: usize,
    #[arg(long)]
    parser_layout: Option<PathBuf>,
}

fn anonymize(args: AnonymizeArgs) -> Result<bool> {
    let mut config = args.backend.run_config()?;
    config.inputs = args.inputs;
    config.target = args.target;
    config.pairs = args.pairs;
    config.lambda = args.lambda;
    config.eta = args.eta;
    config.sampling_steps = args.steps;
    config.seed = args.seed;
    config.guidance_enabled = !args.no_guidance;
    config.keep_regions = args.keep_regions;
    config.composite_background = !args.no_composite;
    config.dilation = args.dilate;
    config.label_map = args.label_map;
    config.out_dir = args.out;
    config.workers = args.workers;
    config.validate()?;

    let backend = build_backend(&config)?;
    let manifest = cmd_anonymize(&config, &backend)?;
    let failed = manifest.failures().count();
    println!(
        "{} of {} images anonymized into {}",
        manifest.records.len() - failed,
        manifest.records.len(),
        config.out_dir.display()
    );
    for r in manifest.failures() {
        eprintln!("{}: {}", r.input_id, r.error.as_deref().unwrap_or("failed"));
    }
    Ok(failed == 0)
}

fn mask(args: MaskArgs) -> Result<bool> {
    let label_map = match &args.label_map {
        Some(p) => LabelMap::from_toml(&std::fs::read_to_string(p)?)?,
        None => LabelMap::default(),
    };
    let backend = args.backend.build()?;
    let out = cmd_mask(
        &args.input,
        &args.keep_regions,
        &label_map,
        backend.parser.as_ref(),
        args.dilate,
        &args.out,
    )?;
    println!("parse: {}", out.parse_path.display());
    println!("mask:  {}", out.mask_path.display());
    println!("editable fraction: {:.4}", out.editable_fraction);
    if let Some(w) = out.warning {
        eprintln!("warning: {w}");
    }
    Ok(true)
}

fn evaluate(args: EvaluateArgs) -> Result<bool> {
    let backend = args.backend.build()?;
    let options = EvaluateOptions {
        threshold: args.threshold,
        exec: Execution::with_workers(args.workers),
        ..Default::default()
    };
    let report = cmd_evaluate(
        &args.originals,
        &args.anonymized,
        backend.embedder.as_ref(),
        &options,
    )?;
    let path = args
        .manifest
        .unwrap_or_else(|| args.anonymized.join("manifest.json"));
    attach_report(&report, &path)?;
    print!("{}", report.to_table());
    println!("manifest: {}", path.display());
    Ok(report.failed.is_empty())
}

fn serve_toy(args: ServeArgs) -> Result<bool> {
    let schedule = ScheduleConfig {
        train_steps: args.train_steps,
        ..Default::default()
    }
    .build()?;
    let mut options = ToyOptions::default();
    if let Some(p) = &args.parser_layout {
        options.layout = ParserLayout::from_toml(&std::fs::read_to_string(p)?)?;
    }
    let backend = Backend::toy(Arc::new(schedule), options);
    let listener = TcpListener::bind(&args.listen)
        .with_context(|| format!("cannot listen on {}", args.listen))?;
    println!("listening on {}", listener.local_addr()?);
    serve(listener, &backend)?;
    bail!("listener closed")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Anonymize(a) => anonymize(a),
        Command::Mask(a) => mask(a),
        Command::Evaluate(a) => evaluate(a),
        Command::ServeToy(a) => serve_toy(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
