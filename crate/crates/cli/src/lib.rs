//! Command-line surface: `train`, `eval`, `predict`, `mosaic build`,
//! `ablate` and `toy`.
//!
//! Every command returns a [`fusioner::Result`]; [`exit_code`] maps errors to
//! the process exit status (2 validation, 3 I/O, 4 numerical).

pub mod toy;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use fusioner::ablation::{run_ablation, AblationGrid, AblationTable};
use fusioner::config::RunConfig;
use fusioner::data::manifest::load_image;
use fusioner::data::mosaic::{load_fss_layout, materialize_mosaic, plan_mosaic4, MosaicSpec};
use fusioner::data::{resize_image, DatasetManifest, SplitScheme};
use fusioner::eval::{CrossValidation, EvalReport};
use fusioner::export::{check_categories, evaluate_prediction_dir, write_overlay, write_prediction};
use fusioner::model::Ablation;
use fusioner::pipeline::{cross_validate_run, evaluate_checkpoint, run_training, TrainRun};
use fusioner::training::checkpoint::load_checkpoint;
use fusioner::{FusionerError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "fusioner",
    version,
    about = "Open-vocabulary segmentation with frozen encoders and cross-modal fusion"
)]
pub struct Cli {
    /// Run everything on one thread so repeated runs are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint, a prediction directory, or all folds of a scheme.
    Eval(EvalArgs),
    /// Predict masks for one image.
    Predict(PredictArgs),
    /// Mosaic-4 composite datasets.
    #[command(subcommand)]
    Mosaic(MosaicCommand),
    /// Train and score component and fusion-size ablations.
    Ablate(AblateArgs),
    /// Generate the coloured-shapes dataset and a matching run configuration.
    Toy(ToyArgs),
}

/// Shared configuration flags. Flags override file values.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override a configuration field, e.g. `--set fusion.layers=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(d) = &self.output_dir {
            // Flags are relative to the working directory, not the file.
            let abs = std::path::absolute(d).map_err(|e| FusionerError::io(d, e))?;
            overrides.push(format!("output_dir={}", toml_string(&abs)));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        RunConfig::load(&self.config, &overrides)
    }
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.to_string_lossy().into_owned()).to_string()
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Miou,
    Fbiou,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with_all = ["predictions", "all_folds"])]
    pub checkpoint: Option<PathBuf>,
    /// Score an existing prediction directory instead of running a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Manifest to evaluate on.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Evaluate under this scheme instead of the checkpoint's own split;
    /// `fss1000`/`custom` treat every manifest category as unseen.
    #[arg(long)]
    pub scheme: Option<SplitScheme>,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Train and evaluate every fold of the configured scheme.
    #[arg(long, requires = "config")]
    pub all_folds: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// `fbiou` adds foreground-background IoU to the report.
    #[arg(long, value_enum, default_value = "miou")]
    pub metric: Metric,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Also write the predictions scored here.
    #[arg(long)]
    pub save_predictions: Option<PathBuf>,
    /// Where reports go; defaults next to the checkpoint or predictions.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Comma-separated category names, in output order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub categories: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Resize the image to this square side first.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub overlay: bool,
}

#[derive(Debug, Subcommand)]
pub enum MosaicCommand {
    /// Build a composite dataset from an FSS-style directory or a manifest.
    Build(MosaicArgs),
}

#[derive(Debug, Args)]
pub struct MosaicArgs {
    /// `<category>/<id>.jpg` tree, or a `.tsv` manifest of single-category images.
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 224)]
    pub tile: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// TOML grid with `variants`, `layers`, `heads` and `widths` lists.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<Ablation>>,
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub heads: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "miou")]
    pub metric: Metric,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Process exit status for an error.
pub fn exit_code(err: &FusionerError) -> u8 {
    match err {
        FusionerError::Io { .. } | FusionerError::Format { .. } => 3,
        FusionerError::Numerical(_) => 4,
        FusionerError::Dimension(_)
        | FusionerError::Validation(_)
        | FusionerError::Config { .. }
        | FusionerError::Backend { .. } => 2,
    }
}

/// Runs `f` on a one-thread pool when deterministic, otherwise on the
/// global pool.
pub fn with_threads<T: Send>(deterministic: bool, f: impl FnOnce() -> T + Send) -> T {
    if deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("thread pool")
            .install(f)
    } else {
        f()
    }
}

/// Dispatches a parsed command line; the returned text is what `main` prints.
pub fn run(cli: Cli) -> Result<String> {
    let deterministic = cli.deterministic;
    with_threads(deterministic, move || match cli.command {
        Command::Train(a) => cmd_train(&a).map(|r| train_message(&r)),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a).map(|files| {
            files
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join("\n")
        }),
        Command::Mosaic(MosaicCommand::Build(a)) => {
            cmd_mosaic(&a).map(|spec| format!("{} composites written to {}", spec.composite_count, a.out.display()))
        }
        Command::Ablate(a) => cmd_ablate(&a).map(|t| t.table()),
        Command::Toy(a) => toy::write_toy(&a.out, a.seed).map(|p| format!("config written to {}", p.display())),
    })
}

fn train_message(r: &TrainRun) -> String {
    format!(
        "trained {} steps ({} epochs), final loss {:.5}; checkpoint {} (config {})",
        r.summary.steps,
        r.summary.epochs,
        r.summary.final_loss,
        r.checkpoint.display(),
        r.config_digest
    )
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainRun> {
    let cfg = args.config.load()?;
    run_training(&cfg)
}

fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| FusionerError::io(dir, e))?;
    let jsonl: String = reports.iter().map(|r| r.json_line() + "\n").collect();
    let path = dir.join("eval_report.jsonl");
    std::fs::write(&path, jsonl).map_err(|e| FusionerError::io(&path, e))?;
    let table: String = reports.iter().map(|r| r.table() + "\n").collect();
    let path = dir.join("eval_report.txt");
    std::fs::write(&path, table).map_err(|e| FusionerError::io(&path, e))
}

fn write_cross_validation(dir: &Path, cv: &CrossValidation) -> Result<()> {
    write_reports(dir, &cv.reports)?;
    let path = dir.join("cross_validation.json");
    let text = serde_json::to_string_pretty(cv).expect("serialisable");
    std::fs::write(&path, text).map_err(|e| FusionerError::io(&path, e))?;
    let path = dir.join("cross_validation.txt");
    std::fs::write(&path, cv.table() + "\n").map_err(|e| FusionerError::io(&path, e))
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    v.as_ref()
        .ok_or_else(|| FusionerError::config(flag, "this flag is required here"))
}

/// Returns the printed report text.
pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let with_fb = args.metric == Metric::Fbiou;
    if args.all_folds {
        let path = require(&args.config, "--config")?;
        let mut cfg = RunConfig::load(path, &args.overrides)?;
        if let Some(s) = args.image_size {
            cfg.data.image_size = Some(s);
        }
        let cv = cross_validate_run(&cfg, with_fb)?;
        let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        write_cross_validation(&out, &cv)?;
        return Ok(cv.table());
    }
    let data = require(&args.data, "--data")?;
    let scheme = args.scheme.map(|s| (s, args.fold));
    let (report, default_out) = if let Some(dir) = &args.predictions {
        let manifest = DatasetManifest::load(data)?;
        let split = match scheme {
            Some((s, f))
                if matches!(
                    s,
                    SplitScheme::Pascal5i | SplitScheme::Coco20i | SplitScheme::TransferCocoToPascal
                ) =>
            {
                Some(fusioner::data::build_fold_split(s, f)?)
            }
            _ => None,
        };
        let label = split.as_ref().map_or("predictions".to_string(), |s| s.descriptor());
        (
            evaluate_prediction_dir(dir, &manifest, split.as_ref(), &label, with_fb)?,
            dir.clone(),
        )
    } else {
        let ckpt = require(&args.checkpoint, "--checkpoint")?;
        let report = evaluate_checkpoint(
            ckpt,
            data,
            scheme,
            args.image_size,
            with_fb,
            args.save_predictions.as_deref(),
        )?;
        let parent = ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
        (report, parent.join("eval"))
    };
    write_reports(args.out.as_ref().unwrap_or(&default_out), std::slice::from_ref(&report))?;
    Ok(report.table())
}

/// Returns the written files: one mask per category, the sidecar and the
/// overlay.
pub fn cmd_predict(args: &PredictArgs) -> Result<Vec<PathBuf>> {
    check_categories(&args.categories)?;
    let (meta, model) = load_checkpoint(&args.checkpoint)?;
    let mut image = load_image(&args.image)?;
    if let Some(s) = args.image_size {
        image = resize_image(&image, s, s)?;
    }
    let pred = model.predict(&image, &args.categories)?;
    let id = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let written = write_prediction(
        &args.out,
        &id,
        &args.categories,
        &pred,
        model.spec.decoder.temperature,
        model.spec.decoder.threshold,
        &meta.config_digest,
    )?;
    let mut files: Vec<PathBuf> = written.mask_files.iter().map(|f| args.out.join(f)).collect();
    files.push(args.out.join(fusioner::export::sidecar_name(&id)));
    if args.overlay {
        files.push(write_overlay(&args.out, &id, &image, &pred.masks, &args.categories)?);
    }
    Ok(files)
}

pub fn cmd_mosaic(args: &MosaicArgs) -> Result<MosaicSpec> {
    if args.tile == 0 {
        return Err(FusionerError::config("--tile", "must be positive"));
    }
    let source = if args.source.is_dir() {
        load_fss_layout(&args.source)?
    } else {
        DatasetManifest::load(&args.source)?
    };
    let spec = plan_mosaic4(&source, args.seed, args.tile)?;
    materialize_mosaic(&source, &spec, &args.out)?;
    Ok(spec)
}

pub fn ablation_grid(args: &AblateArgs) -> Result<AblationGrid> {
    let mut grid = match &args.grid {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| FusionerError::io(p, e))?;
            AblationGrid::from_toml_str(&text)?
        }
        None => AblationGrid::default(),
    };
    if let Some(v) = &args.variants {
        grid.variants = v.clone();
    }
    if let Some(v) = &args.layers {
        grid.layers = v.clone();
    }
    if let Some(v) = &args.heads {
        grid.heads = v.clone();
    }
    if let Some(v) = &args.widths {
        grid.widths = v.clone();
    }
    Ok(grid)
}

/// Writes `ablation.jsonl` and `ablation.txt` into the output directory.
pub fn cmd_ablate(args: &AblateArgs) -> Result<AblationTable> {
    let cfg = args.config.load()?;
    let grid = ablation_grid(args)?;
    let table = run_ablation(&cfg, &grid, args.metric == Metric::Fbiou)?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| FusionerError::io(dir, e))?;
    let jsonl: String = table
        .rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("serialisable") + "\n")
        .collect();
    let path = dir.join("ablation.jsonl");
    std::fs::write(&path, jsonl).map_err(|e| FusionerError::io(&path, e))?;
    let path = dir.join("ablation.txt");
    std::fs::write(&path, table.table()).map_err(|e| FusionerError::io(&path, e))?;
    Ok(table)
}
