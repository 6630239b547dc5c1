//! Subcommands of the `omniseg` binary. Every command returns a
//! [`Failure`] that carries its exit code: 2 for usage and validation
//! problems, 1 for runtime failures.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use omniseg_core::dataio::{
    crop_quadrants, gen_synthetic, overlay, read_mask, read_patch, stitch4, stitch4_masks, write_mask,
    write_patch, Manifest, ManifestDataset, SyntheticSpec,
};
use omniseg_core::datamodel::{Mask, Registries, Sample, Source, Split};
use omniseg_core::losses_metrics::{aggregate_report, dsc, iou, ImageScore, MetricsReport};
use omniseg_core::parallel;
use omniseg_core::training::{train, Checkpoint, SampleSource, TrainConfig};
use omniseg_core::{ModelConfig, OmniSeg};

pub const BEST_CHECKPOINT: &str = "checkpoint_best.json";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.json";
pub const TRAIN_LOG: &str = "train_log.txt";
pub const OVERLAY_ALPHA: f32 = 0.4;
pub const OVERLAY_COLOR: [f32; 3] = [1.0, 0.0, 0.0];

#[derive(Debug, Parser)]
#[command(name = "omniseg", version, about = "Dynamic-head segmentation of kidney tissue structures")]
pub struct Cli {
    /// Worker threads for data loading and batch processing.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the TRAIN split, selecting the best epoch on VAL.
    Train(TrainArgs),
    /// Score a checkpoint on one split and write the metrics report.
    Eval(EvalArgs),
    /// Segment one image and write the mask plus an overlay.
    Predict(PredictArgs),
    /// Combine four 256×256 patches into one 512×512 image.
    Stitch(StitchArgs),
    /// Write a synthetic dataset and its manifest.
    GenSynthetic(GenArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with `[model]`, `[train]` and optional registry tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Registries the manifest was labeled with; must match the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub magnification: u32,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StitchArgs {
    /// Top-left, top-right, bottom-left, bottom-right; a single image with
    /// `--crop`.
    #[arg(num_args = 1..=4, required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, num_args = 4)]
    pub masks: Option<Vec<PathBuf>>,
    #[arg(long, requires = "masks")]
    pub mask_out: Option<PathBuf>,
    /// Split a 512×512 image back into quadrants instead; `--out` is then a
    /// directory.
    #[arg(long)]
    pub crop: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    #[arg(long, default_value_t = 0.03)]
    pub noise: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train:val:test ratio.
    #[arg(long, default_value = "3:1:1")]
    pub split_ratio: String,
}

#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (Failure::Usage(e) | Failure::Runtime(e)) = self;
        write!(f, "{e:#}")
    }
}

impl From<omniseg_core::Error> for Failure {
    fn from(e: omniseg_core::Error) -> Self {
        use omniseg_core::Error as E;
        match e {
            E::Index { .. }
            | E::Shape(_)
            | E::Validation(_)
            | E::Registry(_)
            | E::Checkpoint(_)
            | E::ManifestRow { .. }
            | E::Config(_) => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(msg: impl fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} `{}` does not exist", path.display())))
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub registries: Option<Registries>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        require_file(path, "config")?;
        let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
        toml::from_str(&text).map_err(|e| usage(format!("config `{}`: {e}", path.display())))
    }
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, OmniSeg), Failure> {
    require_file(path, "checkpoint")?;
    let ck = Checkpoint::load(path).map_err(|e| usage(format!("checkpoint `{}`: {e}", path.display())))?;
    let model = ck.to_model()?;
    Ok((ck, model))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path)
        .with_context(|| format!("cannot create `{}`", path.display()))
        .map_err(Failure::Runtime)
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    require_file(&args.manifest, "manifest")?;
    let run = RunConfig::load(args.config.as_deref())?;
    let mut config = run.train;
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.lr {
        config.lr = v;
    }
    if let Some(v) = args.lr_decay {
        config.lr_decay = v;
    }
    if args.max_steps.is_some() {
        config.max_steps = args.max_steps;
    }
    config.validate()?;
    run.model.validate()?;
    let registries = run.registries.unwrap_or_default();
    let manifest = Manifest::load(&args.manifest)?;
    let train_set = ManifestDataset::new(manifest.clone(), registries.clone(), Split::Train)?;
    let val_set = ManifestDataset::new(manifest, registries.clone(), Split::Val)?;
    if train_set.is_empty() {
        return Err(usage("manifest has no TRAIN rows"));
    }
    if val_set.is_empty() {
        return Err(usage("manifest has no VAL rows"));
    }
    let size = run.model.input_size;
    let first = train_set.load(0)?;
    if (first.height(), first.width()) != (size, size) {
        return Err(usage(format!(
            "training images are {}x{} but model.input_size is {size}",
            first.height(),
            first.width()
        )));
    }

    create_dir(&args.out)?;
    let mut model = OmniSeg::new(run.model, registries, config.seed)?;
    let log_path = args.out.join(TRAIN_LOG);
    let mut log = fs::File::create(&log_path).with_context(|| log_path.display().to_string())?;
    let best_path = args.out.join(BEST_CHECKPOINT);
    let last_path = args.out.join(LAST_CHECKPOINT);
    let outcome = train(&mut model, &train_set, &val_set, &config, |event| {
        let r = event.record;
        println!("{r}");
        writeln!(log, "{r}").map_err(|e| omniseg_core::Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        let ck = Checkpoint::from_model(event.model, r.epoch, r.val_mean_dsc);
        ck.save(&last_path)?;
        if event.is_best {
            ck.save(&best_path)?;
        }
        Ok(())
    })?;
    println!(
        "best epoch {} val_mean_dsc {:.6} -> {}",
        outcome.best_epoch,
        outcome.best_val_dsc,
        best_path.display()
    );
    Ok(())
}

/// Scores every sample of `split` and aggregates the per-label report.
pub fn evaluate(model: &OmniSeg, dataset: &ManifestDataset) -> Result<MetricsReport, Failure> {
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let registries = model.registries();
    let scores = parallel::try_map(&indices, |_, &i| {
        let s = dataset.load(i)?;
        let pred = model.predict_mask(&s)?;
        Ok::<_, omniseg_core::Error>(ImageScore {
            semantic_label: registries.classes.entry(s.task_id)?.semantic_label.clone(),
            dsc: dsc(&pred, &s.mask)?,
            iou: iou(&pred, &s.mask)?,
        })
    })?;
    Ok(aggregate_report(&scores)?)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricsReport, Failure> {
    require_file(&args.manifest, "manifest")?;
    let split: Split = args.split.parse()?;
    let (ck, model) = load_checkpoint(&args.checkpoint)?;
    let run = RunConfig::load(args.config.as_deref())?;
    if let Some(regs) = run.registries {
        if regs != ck.registries {
            return Err(usage("schema error: registries differ from the checkpoint's"));
        }
    }
    let manifest = Manifest::load(&args.manifest)?;
    let dataset = ManifestDataset::new(manifest, ck.registries.clone(), split)
        .map_err(|e| usage(format!("schema error: manifest does not match the checkpoint registries: {e}")))?;
    if dataset.is_empty() {
        return Err(usage(format!("no {} rows", split.to_string().to_lowercase())));
    }
    let report = evaluate(&model, &dataset)?;
    create_dir(&args.out)?;
    let text = report.to_text();
    let txt = args.out.join("report.txt");
    let json = args.out.join("report.json");
    fs::write(&txt, &text).with_context(|| txt.display().to_string())?;
    fs::write(&json, report.to_json()?).with_context(|| json.display().to_string())?;
    print!("{text}");
    Ok(report)
}

pub fn cmd_predict(args: &PredictArgs) -> Result<(PathBuf, PathBuf), Failure> {
    require_file(&args.image, "image")?;
    let (_, model) = load_checkpoint(&args.checkpoint)?;
    let registries = model.registries();
    let task = registries.classes.by_name(&args.task)?.id;
    let scale = registries.scales.by_magnification(args.magnification)?.id;
    let image = read_patch(&args.image)?;
    let size = model.config().input_size;
    if (image.height(), image.width()) != (size, size) {
        return Err(usage(format!(
            "shape error: input is {}x{} but the model expects {size}x{size}; \
             combine four quarter-size patches with `omniseg stitch` first",
            image.height(),
            image.width()
        )));
    }
    let mask = Mask::zeros(size, size);
    let sample = Sample::new(image, mask, task, scale, Source::Synthetic, Split::Test)?;
    let pred = model.predict_mask(&sample)?;
    let tinted = overlay(&sample.image, &pred, OVERLAY_COLOR, OVERLAY_ALPHA)?;
    create_dir(&args.out)?;
    let stem = args.image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let mask_path = args.out.join(format!("{stem}_mask.png"));
    let overlay_path = args.out.join(format!("{stem}_overlay.png"));
    write_mask(&mask_path, &pred)?;
    write_patch(&overlay_path, &tinted)?;
    println!(
        "{} foreground pixels -> {}, {}",
        pred.count(),
        mask_path.display(),
        overlay_path.display()
    );
    Ok((mask_path, overlay_path))
}

pub fn cmd_stitch(args: &StitchArgs) -> Result<(), Failure> {
    for p in &args.inputs {
        require_file(p, "input")?;
    }
    if args.crop {
        let [input] = &args.inputs[..] else {
            return Err(usage("--crop takes exactly one input"));
        };
        create_dir(&args.out)?;
        let stem = input.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        for (q, part) in ["tl", "tr", "bl", "br"].iter().zip(crop_quadrants(&read_patch(input)?)?) {
            write_patch(&args.out.join(format!("{stem}_{q}.png")), &part)?;
        }
        return Ok(());
    }
    if args.inputs.len() != 4 {
        return Err(usage(format!("stitching needs exactly 4 inputs, got {}", args.inputs.len())));
    }
    let patches = args.inputs.iter().map(|p| read_patch(p)).collect::<Result<Vec<_>, _>>()?;
    write_patch(&args.out, &stitch4(&patches)?)?;
    if let (Some(masks), Some(out)) = (&args.masks, &args.mask_out) {
        for p in masks {
            require_file(p, "mask")?;
        }
        let masks = masks.iter().map(|p| read_mask(p)).collect::<Result<Vec<_>, _>>()?;
        write_mask(out, &stitch4_masks(&masks)?)?;
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn parse_ratio(text: &str) -> Result<[usize; 3], Failure> {
    let parts: Vec<usize> = text
        .split(':')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("split ratio `{text}` is not of the form a:b:c")))?;
    <[usize; 3]>::try_from(parts).map_err(|_| usage(format!("split ratio `{text}` needs three parts")))
}

pub fn cmd_gen_synthetic(args: &GenArgs) -> Result<Manifest, Failure> {
    let spec = SyntheticSpec {
        count_per_task: args.count,
        image_size: args.size,
        noise: args.noise,
        seed: args.seed,
        split_ratio: parse_ratio(&args.split_ratio)?,
    };
    spec.validate()?;
    let manifest = gen_synthetic(&spec, &Registries::default(), &args.out)?;
    println!(
        "wrote {} rows to {}",
        manifest.rows.len(),
        args.out.join("manifest.csv").display()
    );
    Ok(manifest)
}

pub fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let work = || match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Predict(a) => cmd_predict(a).map(drop),
        Command::Stitch(a) => cmd_stitch(a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a).map(drop),
    };
    parallel::with_workers(cli.workers, work).map_err(usage)?
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}
