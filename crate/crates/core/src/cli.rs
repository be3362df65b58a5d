//! `fundus-lime` command line: `segment`, `explain`, `evaluate`.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 external model unreachable.
//! Numeric settings resolve as flags, then the `--config` JSON file, then defaults.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adapters::{timeout_from_env, ModelSpec};
use crate::dataset::{scan_dataset_with, ClassMapping, DatasetManifest};
use crate::error::{Error, Result};
use crate::evaluate::{misclassification_report, read_prediction_log, Split};
use crate::image::{load_image, save_png, ClassLabel};
use crate::overlay::render_overlay;
use crate::perturb::{build_batch, BatchConfig, FusionPolicy, DEFAULT_KERNEL_WIDTH, DEFAULT_SAMPLES};
use crate::segmentation::{segment_slic, SegmentMap, SegmentationParams};
use crate::surrogate::{explain, predicted_class, RidgeConfig, DEFAULT_LAMBDA, DEFAULT_TOP_K};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;

/// Used whenever no seed is given, so unscripted runs are reproducible.
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(
    name = "fundus-lime",
    version,
    about = "Superpixel explanations for fundus image classifiers"
)]
pub struct Cli {
    /// Print machine-readable JSON on stdout instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    /// JSON file with default settings; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split an image into superpixels; writes a JSON map and a 16-bit label PNG.
    Segment(SegmentArgs),
    /// Explain one prediction: segment, perturb, fit the surrogate, render the overlay.
    Explain(ExplainArgs),
    /// Accuracy, loss and misclassification report from a prediction log.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args, Default)]
pub struct SlicArgs {
    /// Target number of superpixels.
    #[arg(long)]
    pub segments: Option<usize>,
    #[arg(long)]
    pub compactness: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub slic: SlicArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Segment map JSON output.
    #[arg(long, default_value = "segments.json")]
    pub out: PathBuf,
    /// Label PNG output [default: --out with a .png extension].
    #[arg(long)]
    pub labels_png: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    SegmentMean,
    Gray,
    Black,
}

impl From<Fusion> for FusionPolicy {
    fn from(f: Fusion) -> Self {
        match f {
            Fusion::SegmentMean => FusionPolicy::SegmentMean,
            Fusion::Gray => FusionPolicy::FixedColor { color: [0.5; 3] },
            Fusion::Black => FusionPolicy::FixedColor { color: [0.0; 3] },
        }
    }
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// oracle:<map-file>:<segment-id> | tinycnn:<spec-file> | proc:<command line> | http:<url>
    #[arg(long)]
    pub model: Option<String>,
    /// Use this segment map instead of running SLIC.
    #[arg(long)]
    pub map: Option<PathBuf>,
    #[command(flatten)]
    pub slic: SlicArgs,
    /// Perturbed samples, including the original image.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Locality kernel width.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Ridge penalty.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Class to explain [default: the class predicted for the original image].
    #[arg(long)]
    pub target_class: Option<u8>,
    #[arg(long, value_enum)]
    pub fusion: Option<Fusion>,
    /// Worker threads for model queries [default: all cores].
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value = "explanation.json")]
    pub explanation: PathBuf,
    #[arg(long, default_value = "overlay.png")]
    pub overlay: PathBuf,
    /// Also write the perturbation batch (masks, weights, predictions) as JSON.
    #[arg(long)]
    pub batch_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// JSON Lines prediction log.
    #[arg(long)]
    pub log: PathBuf,
    /// Dataset manifest JSON that sample ids are resolved against.
    #[arg(long, conflicts_with = "dataset")]
    pub manifest: Option<PathBuf>,
    /// Dataset root to scan instead of a manifest file.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    pub model_id: String,
    #[arg(long, value_enum, default_value = "valid")]
    pub split: Split,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Also write the text table here.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

/// Settings file for `--config`. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub segments: Option<usize>,
    pub compactness: Option<f64>,
    pub iterations: Option<usize>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub sigma: Option<f64>,
    pub lambda: Option<f64>,
    pub top_k: Option<usize>,
    pub fusion: Option<Fusion>,
    pub threads: Option<usize>,
    pub model: Option<String>,
    /// Dataset folder name to label overrides.
    pub classes: Option<BTreeMap<String, u8>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

fn slic_params(args: &SlicArgs, seed: Option<u64>, cfg: &FileConfig) -> SegmentationParams {
    let d = SegmentationParams::default();
    SegmentationParams {
        target_segments: args.segments.or(cfg.segments).unwrap_or(d.target_segments),
        compactness: args.compactness.or(cfg.compactness).unwrap_or(d.compactness),
        max_iterations: args.iterations.or(cfg.iterations).unwrap_or(d.max_iterations),
        seed: seed.or(cfg.seed).unwrap_or(DEFAULT_SEED),
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_transport() {
                EXIT_TRANSPORT
            } else {
                EXIT_INPUT
            }
        }
    }
}

pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    run(std::env::args_os())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::Segment(a) => cmd_segment(a, &cfg, cli.json),
        Command::Explain(a) => cmd_explain(a, &cfg, cli.json),
        Command::Evaluate(a) => cmd_evaluate(a, &cfg, cli.json),
    }
}

pub fn cmd_segment(args: &SegmentArgs, cfg: &FileConfig, json: bool) -> Result<()> {
    let image = load_image(&args.image)?;
    let params = slic_params(&args.slic, args.seed, cfg);
    let map = segment_slic(&image, &params)?;
    let png = args
        .labels_png
        .clone()
        .unwrap_or_else(|| args.out.with_extension("png"));
    map.save_json(&args.out)?;
    map.save_label_png(&png)?;
    if json {
        let summary = json!({
            "segments": map.segment_count(),
            "width": map.width(),
            "height": map.height(),
            "map": args.out,
            "labels_png": png,
        });
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        println!(
            "{} segments ({}x{}) -> {}, {}",
            map.segment_count(),
            map.width(),
            map.height(),
            args.out.display(),
            png.display()
        );
    }
    Ok(())
}

pub fn cmd_explain(args: &ExplainArgs, cfg: &FileConfig, json: bool) -> Result<()> {
    let image = load_image(&args.image)?;
    let map = match &args.map {
        Some(p) => {
            let m = SegmentMap::load_json(p)?;
            m.check_image(&image)?;
            m
        }
        None => segment_slic(&image, &slic_params(&args.slic, args.seed, cfg))?,
    };
    let spec: ModelSpec = args
        .model
        .as_deref()
        .or(cfg.model.as_deref())
        .ok_or_else(|| Error::contract("--model is required"))?
        .parse()?;
    let model = spec.build(&image, timeout_from_env()?)?;

    let batch_cfg = BatchConfig {
        samples: args.samples.or(cfg.samples).unwrap_or(DEFAULT_SAMPLES),
        seed: args.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED),
        kernel_width: args.sigma.or(cfg.sigma).unwrap_or(DEFAULT_KERNEL_WIDTH),
        policy: args.fusion.or(cfg.fusion).unwrap_or(Fusion::SegmentMean).into(),
    };
    let ridge = RidgeConfig {
        lambda: args.lambda.or(cfg.lambda).unwrap_or(DEFAULT_LAMBDA),
        top_k: args.top_k.or(cfg.top_k).unwrap_or(DEFAULT_TOP_K),
    };
    ridge.validate()?;

    let threads = args.threads.or(cfg.threads).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::contract(format!("cannot start thread pool: {e}")))?;
    let batch = pool.install(|| build_batch(&image, &map, &batch_cfg, model.as_ref()))?;

    let target = match args.target_class {
        Some(v) => ClassLabel::from_index(v)?,
        None => predicted_class(&batch)?,
    };
    let explanation = explain(&batch, &target, &ridge, model.id())?;
    let overlay = render_overlay(&image, &map, &explanation, ridge.top_k)?;

    if let Some(p) = &args.batch_out {
        batch.save_json(p)?;
    }
    explanation.save_json(&args.explanation)?;
    save_png(&overlay, &args.overlay)?;

    if json {
        print!("{}", explanation.to_json()?);
    } else {
        print!("{}", explanation.render_text());
        println!("wrote {} and {}", args.explanation.display(), args.overlay.display());
    }
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs, cfg: &FileConfig, json: bool) -> Result<()> {
    let records = read_prediction_log(&args.log)?;
    let manifest = match (&args.manifest, &args.dataset) {
        (Some(p), _) => Some(DatasetManifest::load_json(p)?),
        (None, Some(root)) => {
            let mapping = cfg
                .classes
                .clone()
                .map(|folders| ClassMapping { folders })
                .unwrap_or_default();
            Some(scan_dataset_with(root, &mapping)?)
        }
        (None, None) => None,
    };
    let report = misclassification_report(&records, manifest.as_ref(), &args.model_id, args.split)?;
    crate::io::write_atomic(&args.out, report.to_json()?.as_bytes())?;
    let table = report.render_text();
    if let Some(p) = &args.table {
        crate::io::write_atomic(p, table.as_bytes())?;
    }
    if json {
        print!("{}", report.to_json()?);
    } else {
        print!("{table}");
    }
    Ok(())
}
