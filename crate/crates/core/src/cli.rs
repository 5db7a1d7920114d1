//! Command-line front end: argument parsing, run manifests, figures.
//!
//! Every subcommand returns through [`dispatch`], which maps failures onto
//! exit codes: 0 success, 1 validation error, 2 I/O error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::annotations::{
    base_dir, drop_later, find_near_duplicates, load_annotations_with, save_annotations, split_dataset,
    AnnotatedImage, AnnotationSet,
};
use crate::error::{Error, Result};
use crate::groundtruth::{compute_adaptive_sigmas, generate_ground_truth, make_density_map, SigmaPolicy};
use crate::imaging::{load_rgb, save_rgb, to_tensor};
use crate::io::{create_dir, write_atomic};
use crate::localization::{default_min_intensity, localize, LocalizeParams, Localization, DEFAULT_MIN_DISTANCE};
use crate::metrics::{aggregate, evaluate_prediction, threshold_grid, MetricsReport};
use crate::network::{load_checkpoint, save_checkpoint, Model, NetworkConfig};
use crate::raster::{self, Raster};
use crate::synthdata::{generate_dataset, SceneConfig};
use crate::training::{history_csv, predict_density, train, LossConfig, Sample, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "AGREGNET_THREADS";

#[derive(Parser, Debug)]
#[command(name = "agregnet", version, about = "Density-map counting and localization from point annotations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic canopy dataset.
    Synth(SynthArgs),
    /// Write density and segmentation maps for every annotated image.
    GenGt(GenGtArgs),
    /// Train a model on a seeded split of an annotation file.
    Train(TrainArgs),
    /// Predict density maps with a trained checkpoint.
    Predict(PredictArgs),
    /// Detect peaks in one density map and match them to the annotation.
    Localize(LocalizeArgs),
    /// Score predicted density maps against ground truth.
    Eval(EvalArgs),
    /// Render result tables and figures from one or more eval runs.
    Report(ReportArgs),
    /// List near-duplicate image pairs.
    Dedup(DedupArgs),
}

#[derive(Args, Debug)]
struct SigmaArgs {
    /// Fraction of the nearest-neighbor distance (0.15 flowers, 0.25 fruit).
    #[arg(long, default_value_t = SigmaPolicy::FLOWER_RATIO)]
    sigma_ratio: f64,
    /// Sigma for an image with a single object.
    #[arg(long, default_value_t = 8.0)]
    fallback_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    min_sigma: f64,
}

impl SigmaArgs {
    fn policy(&self) -> Result<SigmaPolicy> {
        let p = SigmaPolicy {
            ratio: self.sigma_ratio,
            fallback_sigma: self.fallback_sigma,
            min_sigma: self.min_sigma,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scene config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenGtArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sigma: SigmaArgs,
    /// Reject unknown keys in the annotation file.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run config JSON with optional `network`, `train`, `loss`, `sigma`,
    /// `train_fraction` and `split_seed` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `split.json` from a training run; only its test images are predicted.
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    #[arg(long)]
    density: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Annotated image the map belongs to; inferred from the file name otherwise.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MIN_DISTANCE)]
    min_distance: usize,
    /// Peak floor; defaults to a fraction of the kernel peak at the dataset mean sigma.
    #[arg(long)]
    min_intensity: Option<f64>,
    #[command(flatten)]
    sigma: SigmaArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// JSON report path; a Markdown table is written next to it.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MIN_DISTANCE)]
    min_distance: usize,
    #[arg(long)]
    min_intensity: Option<f64>,
    #[command(flatten)]
    sigma: SigmaArgs,
    /// Row label for tables; defaults to the model variant or the prediction directory name.
    #[arg(long)]
    label: Option<String>,
    /// Directory for density overlays and the count scatter plot.
    #[arg(long)]
    figures: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Eval report files, or directories holding a `report.json`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Markdown output; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-render overlay figures for each run into this directory.
    #[arg(long)]
    figures: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DedupArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    threshold: f64,
    /// Keep the lexicographically first image of each pair and write the rest to --out.
    #[arg(long, requires = "out")]
    drop_later: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Everything needed to rerun a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_paths: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Resolved settings, defaults included.
    pub settings: serde_json::Value,
    pub outputs: Vec<PathBuf>,
}

/// Settings file accepted by `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub sigma: SigmaPolicy,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            sigma: SigmaPolicy::default(),
            train_fraction: 0.75,
            split_seed: 0,
        }
    }
}

/// Paths of the train/test partition written by `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

/// What `eval` writes: the metrics plus where they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub pred_dir: PathBuf,
    pub gt_dir: PathBuf,
    pub annotations: PathBuf,
    pub params: LocalizeParams,
    pub sigma: SigmaPolicy,
    pub metrics: MetricsReport,
}

struct Ctx {
    argv: Vec<String>,
    started: u64,
}

impl Ctx {
    fn manifest(
        &self,
        command: &str,
        config_paths: Vec<PathBuf>,
        seed: Option<u64>,
        settings: serde_json::Value,
        outputs: Vec<PathBuf>,
        path: &Path,
    ) -> Result<()> {
        let m = RunManifest {
            command: command.into(),
            argv: self.argv.clone(),
            config_paths,
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix: self.started,
            finished_unix: now(),
            settings,
            outputs,
        };
        write_json(path, &m)
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.into(),
        message: e.to_string(),
    })
}

fn to_json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("settings serialize")
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Raster file for an image: its path without extension plus `suffix`, under `dir`.
pub fn map_path(dir: &Path, image_path: &Path, suffix: &str) -> PathBuf {
    sibling(&dir.join(image_path.with_extension("")), suffix)
}

pub const DENSITY_SUFFIX: &str = ".density.fmap";
pub const SEGMENTATION_SUFFIX: &str = ".seg.fmap";

/// Worker-thread cap from `AGREGNET_THREADS`, if set.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Validation(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A second call in the same process (tests) is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parse `argv` (program name first), run the subcommand, return the exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let ctx = Ctx {
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        started: now(),
    };
    let result = configure_threads().and_then(|_| run(&ctx, cli.command));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                EXIT_IO
            } else {
                EXIT_VALIDATION
            }
        }
    }
}

fn run(ctx: &Ctx, command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(ctx, a),
        Command::GenGt(a) => gen_gt(ctx, a),
        Command::Train(a) => train_cmd(ctx, a),
        Command::Predict(a) => predict(ctx, a),
        Command::Localize(a) => localize_cmd(ctx, a),
        Command::Eval(a) => eval(ctx, a),
        Command::Report(a) => report(a),
        Command::Dedup(a) => dedup(ctx, a),
    }
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let cfg: SceneConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SceneConfig::default(),
    };
    cfg.validate()?;
    let set = generate_dataset(&cfg, a.count, &a.out)?;
    let mut outputs: Vec<PathBuf> = set.images.iter().map(|i| a.out.join(&i.image_path)).collect();
    outputs.push(a.out.join("annotations.json"));
    println!("wrote {} scenes to {}", a.count, a.out.display());
    ctx.manifest(
        "synth",
        a.config.into_iter().collect(),
        Some(cfg.seed),
        to_json(&cfg),
        outputs,
        &a.out.join("manifest.json"),
    )
}

fn gen_gt(ctx: &Ctx, a: GenGtArgs) -> Result<()> {
    let policy = a.sigma.policy()?;
    let set = load_annotations_with(&a.annotations, a.strict)?;
    create_dir(&a.out)?;
    let mut outputs = Vec::new();
    for img in &set.images {
        let gt = generate_ground_truth(img, &policy)?;
        let dp = map_path(&a.out, &img.image_path, DENSITY_SUFFIX);
        let sp = map_path(&a.out, &img.image_path, SEGMENTATION_SUFFIX);
        raster::write_f32(&dp, &gt.density.data)?;
        raster::write_u8(&sp, &gt.segmentation.data)?;
        outputs.extend([dp, sp]);
    }
    println!("wrote ground truth for {} images to {}", set.images.len(), a.out.display());
    ctx.manifest(
        "gen-gt",
        vec![a.annotations.clone()],
        None,
        to_json(&policy),
        outputs,
        &a.out.join("manifest.json"),
    )
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let cfg: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    cfg.network.validate()?;
    cfg.train.validate()?;
    cfg.loss.validate()?;
    cfg.sigma.validate()?;
    let set = load_annotations_with(&a.annotations, false)?;
    let base = base_dir(&a.annotations);
    let split = split_dataset(&set.images, cfg.train_fraction, cfg.split_seed)?;
    let load = |imgs: &[AnnotatedImage]| {
        imgs.iter()
            .map(|i| Sample::load(i, &base, &cfg.sigma))
            .collect::<Result<Vec<_>>>()
    };
    let (tr, te) = (load(&split.train)?, load(&split.test)?);
    create_dir(&a.out)?;
    let split_path = a.out.join("split.json");
    write_json(
        &split_path,
        &SplitFile {
            train: split.train.iter().map(|i| i.image_path.clone()).collect(),
            test: split.test.iter().map(|i| i.image_path.clone()).collect(),
        },
    )?;
    let mut model = Model::<f32>::new(&cfg.network, cfg.train.seed)?;
    log::info!(
        "{}: {} parameters, {} train / {} test images",
        cfg.network.variant_name(),
        model.trainable_parameters(),
        tr.len(),
        te.len()
    );
    let history_path = a.out.join("history.csv");
    let mut seen = Vec::new();
    let outcome = train(&mut model, &tr, &te, &cfg.train, &cfg.loss, |r| {
        seen.push(r.clone());
        // Keep the history current so an interrupted run still leaves a log.
        let _ = write_atomic(&history_path, history_csv(&seen).as_bytes());
    })?;
    write_atomic(&history_path, history_csv(&outcome.history).as_bytes())?;
    let ckpt = a.out.join("best.ckpt");
    save_checkpoint(&model, &ckpt)?;
    println!("best epoch {} saved to {}", outcome.best_epoch, ckpt.display());
    ctx.manifest(
        "train",
        a.config.into_iter().chain([a.annotations.clone()]).collect(),
        Some(cfg.train.seed),
        to_json(&cfg),
        vec![split_path, history_path, ckpt],
        &a.out.join("manifest.json"),
    )
}

fn predict(ctx: &Ctx, a: PredictArgs) -> Result<()> {
    let mut model: Model<f32> = load_checkpoint(&a.checkpoint)?;
    let set = load_annotations_with(&a.annotations, false)?;
    let base = base_dir(&a.annotations);
    let images: Vec<&AnnotatedImage> = match &a.split {
        Some(p) => {
            let split: SplitFile = read_json(p)?;
            split
                .test
                .iter()
                .map(|t| {
                    set.find(t)
                        .ok_or_else(|| Error::Validation(format!("{} lists {} which is not annotated", p.display(), t.display())))
                })
                .collect::<Result<_>>()?
        }
        None => set.images.iter().collect(),
    };
    create_dir(&a.out)?;
    let mut outputs = Vec::new();
    for img in images {
        let rgb = load_rgb(&base.join(&img.image_path))?;
        let density = predict_density(&mut model, &to_tensor(&rgb))?;
        let p = map_path(&a.out, &img.image_path, DENSITY_SUFFIX);
        raster::write_f32(&p, &density)?;
        outputs.push(p);
    }
    println!("wrote {} density maps to {}", outputs.len(), a.out.display());
    ctx.manifest(
        "predict",
        vec![a.checkpoint.clone(), a.annotations.clone()],
        None,
        serde_json::json!({ "network": model.config(), "variant": model.config().variant_name() }),
        outputs,
        &a.out.join("manifest.json"),
    )
}

/// Mean adaptive sigma over every annotated point (1.0 without points).
fn dataset_mean_sigma(set: &AnnotationSet, policy: &SigmaPolicy) -> f64 {
    let all: Vec<f64> = set
        .images
        .iter()
        .flat_map(|i| compute_adaptive_sigmas(&i.coords(), policy))
        .collect();
    if all.is_empty() {
        1.0
    } else {
        all.iter().sum::<f64>() / all.len() as f64
    }
}

fn localize_params(min_distance: usize, min_intensity: Option<f64>, set: &AnnotationSet, policy: &SigmaPolicy) -> Result<LocalizeParams> {
    let min_intensity = min_intensity.unwrap_or_else(|| default_min_intensity(dataset_mean_sigma(set, policy)));
    if !(min_intensity >= 0.0 && min_intensity.is_finite()) {
        return Err(Error::Validation(format!("--min-intensity must be >= 0, got {min_intensity}")));
    }
    Ok(LocalizeParams {
        min_distance,
        min_intensity,
    })
}

fn strip_suffix(name: &str) -> &str {
    name.strip_suffix(DENSITY_SUFFIX)
        .or_else(|| name.strip_suffix(".fmap"))
        .unwrap_or(name)
}

fn localize_cmd(ctx: &Ctx, a: LocalizeArgs) -> Result<()> {
    let policy = a.sigma.policy()?;
    let set = load_annotations_with(&a.annotations, false)?;
    let density = raster::read_f32(&a.density)?;
    let img = match &a.image {
        Some(p) => set.find(p),
        None => {
            let name = a.density.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let stem = strip_suffix(&name);
            set.images
                .iter()
                .find(|i| i.image_path.with_extension("").file_name().is_some_and(|f| f.to_string_lossy() == stem))
        }
    }
    .ok_or_else(|| {
        Error::Validation(format!(
            "no annotated image matches {}; pass --image",
            a.density.display()
        ))
    })?;
    if density.dims() != (img.width as usize, img.height as usize) {
        return Err(Error::Validation(format!(
            "{} is {}x{} but {} is annotated as {}x{}",
            a.density.display(),
            density.width(),
            density.height(),
            img.image_path.display(),
            img.width,
            img.height
        )));
    }
    let params = localize_params(a.min_distance, a.min_intensity, &set, &policy)?;
    let loc = localize(&density, &img.coords(), &params);
    write_json(&a.out, &loc.to_json())?;
    println!(
        "{}: count {:.2}, {} peaks, {} matched",
        img.image_path.display(),
        loc.count,
        loc.peaks.len(),
        loc.matching.pairs.len()
    );
    ctx.manifest(
        "localize",
        vec![a.annotations.clone()],
        None,
        to_json(&params),
        vec![a.out.clone()],
        &sibling(&a.out, ".manifest.json"),
    )
}

/// Model variant recorded by `predict`, if any.
fn predicted_variant(pred_dir: &Path) -> Option<String> {
    let m: RunManifest = read_json(&pred_dir.join("manifest.json")).ok()?;
    m.settings.get("variant")?.as_str().map(str::to_owned)
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let policy = a.sigma.policy()?;
    let set = load_annotations_with(&a.annotations, false)?;
    let params = localize_params(a.min_distance, a.min_intensity, &set, &policy)?;
    let mut per_image = Vec::new();
    for img in &set.images {
        let pp = map_path(&a.pred_dir, &img.image_path, DENSITY_SUFFIX);
        if !pp.exists() {
            continue;
        }
        let pred = raster::read_f32(&pp)?;
        let gt_path = map_path(&a.gt_dir, &img.image_path, DENSITY_SUFFIX);
        let gt = raster::read_f32(&gt_path)?;
        if pred.dims() != gt.dims() {
            return Err(Error::Validation(format!(
                "{} and {} differ in size",
                pp.display(),
                gt_path.display()
            )));
        }
        let sigmas = compute_adaptive_sigmas(&img.coords(), &policy);
        per_image.push(evaluate_prediction(
            img.image_path.clone(),
            &pred,
            &gt,
            &img.coords(),
            &sigmas,
            &params,
        )?);
    }
    if per_image.is_empty() {
        return Err(Error::Validation(format!(
            "--pred-dir {} holds no density map for any image in {}",
            a.pred_dir.display(),
            a.annotations.display()
        )));
    }
    let metrics = aggregate(per_image)?;
    let label = a
        .label
        .clone()
        .or_else(|| predicted_variant(&a.pred_dir))
        .unwrap_or_else(|| {
            a.pred_dir
                .file_name()
                .map_or_else(|| a.pred_dir.display().to_string(), |n| n.to_string_lossy().into_owned())
        });
    let rep = EvalReport {
        label,
        pred_dir: a.pred_dir.clone(),
        gt_dir: a.gt_dir.clone(),
        annotations: a.annotations.clone(),
        params,
        sigma: policy,
        metrics,
    };
    write_json(&a.report, &rep)?;
    let table = render_table(std::slice::from_ref(&rep));
    let md = a.report.with_extension("md");
    write_atomic(&md, table.as_bytes())?;
    print!("{table}");
    let mut outputs = vec![a.report.clone(), md];
    if let Some(dir) = &a.figures {
        outputs.extend(render_figures(&rep, dir)?);
    }
    ctx.manifest(
        "eval",
        vec![a.annotations.clone()],
        None,
        serde_json::json!({ "params": params, "sigma": policy }),
        outputs,
        &sibling(&a.report, ".manifest.json"),
    )
}

/// Markdown table with one row per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut s = String::from("| Model | PSNR | SSIM | MAE | RMSE | pMAE (%) | mAP | mAR |\n");
    s.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
    for r in reports {
        let m = &r.metrics;
        s.push_str(&format!(
            "| {} | {:.2} | {:.3} | {:.2} | {:.2} | {:.1} | {:.2} | {:.2} |\n",
            r.label, m.psnr, m.ssim, m.mae, m.rmse, m.pmae, m.map, m.mar
        ));
    }
    s
}

fn report(a: ReportArgs) -> Result<()> {
    let reports = a
        .runs
        .iter()
        .map(|p| {
            let file = if p.is_dir() { p.join("report.json") } else { p.clone() };
            read_json::<EvalReport>(&file)
        })
        .collect::<Result<Vec<_>>>()?;
    let table = render_table(&reports);
    match &a.out {
        Some(p) => write_atomic(p, table.as_bytes())?,
        None => print!("{table}"),
    }
    if let Some(dir) = &a.figures {
        for r in &reports {
            let sub = dir.join(sanitize(&r.label));
            render_figures(r, &sub)?;
        }
    }
    Ok(())
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn dedup(ctx: &Ctx, a: DedupArgs) -> Result<()> {
    let set = load_annotations_with(&a.annotations, false)?;
    let pairs = find_near_duplicates(&set.images, &base_dir(&a.annotations), a.threshold)?;
    for (x, y) in &pairs {
        println!("{}\t{}", x.display(), y.display());
    }
    if a.drop_later {
        let out = a.out.clone().expect("clap enforces --out");
        // Image paths stay relative to the original annotation directory.
        if base_dir(&out) != base_dir(&a.annotations) {
            log::warn!("{} is not next to the images; relative paths may not resolve", out.display());
        }
        let kept = AnnotationSet {
            images: drop_later(&set.images, &pairs),
            ..set.clone()
        };
        save_annotations(&out, &kept)?;
        println!("kept {} of {} images", kept.images.len(), set.images.len());
        ctx.manifest(
            "dedup",
            vec![a.annotations.clone()],
            None,
            serde_json::json!({ "threshold": a.threshold }),
            vec![out.clone()],
            &sibling(&out, ".manifest.json"),
        )?;
    }
    Ok(())
}

// Figures ---------------------------------------------------------------

const RED: Rgb<u8> = Rgb([255, 0, 0]);
const BLUE: Rgb<u8> = Rgb([0, 64, 255]);
const MAGENTA: Rgb<u8> = Rgb([255, 0, 255]);
const YELLOW: Rgb<u8> = Rgb([255, 255, 0]);
const CYAN: Rgb<u8> = Rgb([0, 255, 255]);

/// Perceptually ordered dark-to-bright ramp.
fn heat(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [(1.5 * t).min(1.0), (1.5 * t - 0.5).clamp(0.0, 1.0), (3.0 * t - 2.0).clamp(0.0, 1.0)]
}

/// Image with the density map blended on top, brighter where denser.
pub fn density_overlay(img: &RgbImage, density: &Raster<f32>) -> RgbImage {
    let peak = density.max_value().max(f64::MIN_POSITIVE);
    let mut out = img.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if (x as usize) >= density.width() || (y as usize) >= density.height() {
            continue;
        }
        let t = (density.get(x as usize, y as usize) as f64 / peak).max(0.0);
        let c = heat(t);
        let a = 0.75 * t.sqrt();
        for k in 0..3 {
            px.0[k] = ((1.0 - a) * px.0[k] as f64 * 0.6 + a * 255.0 * c[k]).round() as u8;
        }
    }
    out
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn dot(img: &mut RgbImage, x: f64, y: f64, r: i64, c: Rgb<u8>) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        put(img, (a.0 + t * (b.0 - a.0)).round() as i64, (a.1 + t * (b.1 - a.1)).round() as i64, c);
    }
}

/// Localization figure. Red: ground truth, blue: true positive, magenta:
/// false negative, yellow: false positive, cyan: ground truth to its true
/// positive. A match counts as true positive within `threshold` pixels.
pub fn localization_overlay(base: &RgbImage, gt: &[(f64, f64)], loc: &Localization, threshold: f64) -> RgbImage {
    let mut img = base.clone();
    let mut gt_hit = vec![false; gt.len()];
    let mut pred_hit = vec![false; loc.peaks.len()];
    for p in &loc.matching.pairs {
        if p.distance <= threshold {
            gt_hit[p.gt_index] = true;
            pred_hit[p.pred_index] = true;
            let q = loc.peaks[p.pred_index];
            line(&mut img, gt[p.gt_index], (q.0 as f64, q.1 as f64), CYAN);
        }
    }
    for (&(x, y), &hit) in gt.iter().zip(&gt_hit) {
        dot(&mut img, x, y, 2, if hit { RED } else { MAGENTA });
    }
    for (&(x, y), &hit) in loc.peaks.iter().zip(&pred_hit) {
        dot(&mut img, x as f64, y as f64, 1, if hit { BLUE } else { YELLOW });
    }
    img
}

/// Predicted vs ground-truth count, one dot per image, with the identity line.
pub fn count_scatter(points: &[(f64, f64)]) -> RgbImage {
    let (size, pad) = (400u32, 30.0);
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let hi = points.iter().fold(1.0f64, |m, &(g, p)| m.max(g).max(p)) * 1.05;
    let span = size as f64 - 2.0 * pad;
    let to_px = |g: f64, p: f64| (pad + g / hi * span, size as f64 - pad - p / hi * span);
    let black = Rgb([0, 0, 0]);
    line(&mut img, to_px(0.0, 0.0), to_px(hi, 0.0), black);
    line(&mut img, to_px(0.0, 0.0), to_px(0.0, hi), black);
    line(&mut img, to_px(0.0, 0.0), to_px(hi, hi), Rgb([160, 160, 160]));
    for &(g, p) in points {
        let (x, y) = to_px(g, p);
        dot(&mut img, x, y, 3, BLUE);
    }
    img
}

/// Overlays per image plus the count scatter; returns the written paths.
pub fn render_figures(rep: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let set = load_annotations_with(&rep.annotations, false)?;
    let base = base_dir(&rep.annotations);
    create_dir(dir)?;
    let mut written = Vec::new();
    let mut counts = Vec::new();
    for m in &rep.metrics.per_image {
        let img = set
            .find(&m.file)
            .ok_or_else(|| Error::Validation(format!("{} is not in {}", m.file.display(), rep.annotations.display())))?;
        let pred = raster::read_f32(&map_path(&rep.pred_dir, &img.image_path, DENSITY_SUFFIX))?;
        let rgb = load_rgb(&base.join(&img.image_path))?;
        let gt = img.coords();
        let loc = localize(&pred, &gt, &rep.params);
        let sigmas = make_density_map(img, &rep.sigma)?.sigmas;
        let threshold = threshold_grid(&sigmas)[0];
        let d = map_path(dir, &img.image_path, ".density.png");
        save_rgb(&d, &density_overlay(&rgb, &pred))?;
        let l = map_path(dir, &img.image_path, ".points.png");
        save_rgb(&l, &localization_overlay(&rgb, &gt, &loc, threshold))?;
        written.extend([d, l]);
        counts.push((m.gt_count, m.pred_count));
    }
    let s = dir.join("count_scatter.png");
    save_rgb(&s, &count_scatter(&counts))?;
    written.push(s);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_and_help_exit_zero() {
        assert_eq!(dispatch(["agregnet", "--version"]), EXIT_OK);
        assert_eq!(dispatch(["agregnet", "--help"]), EXIT_OK);
    }

    #[test]
    fn bad_usage_exits_one() {
        assert_eq!(dispatch(["agregnet"]), EXIT_VALIDATION);
        assert_eq!(dispatch(["agregnet", "frobnicate"]), EXIT_VALIDATION);
        assert_eq!(
            dispatch(["agregnet", "eval", "--gt-dir", "g", "--annotations", "a.json", "--report", "r.json"]),
            EXIT_VALIDATION
        );
    }

    #[test]
    fn missing_file_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("absent.json");
        let out = dir.path().join("gt");
        assert_eq!(
            dispatch(["agregnet", "gen-gt", "--annotations", a.to_str().unwrap(), "--out", out.to_str().unwrap()]),
            EXIT_IO
        );
    }

    #[test]
    fn map_paths_strip_extension() {
        let p = map_path(Path::new("out"), Path::new("sub/img_0001.png"), DENSITY_SUFFIX);
        assert_eq!(p, Path::new("out/sub/img_0001.density.fmap"));
        assert_eq!(strip_suffix("img_0001.density.fmap"), "img_0001");
    }

    #[test]
    fn table_formats_two_decimals() {
        let rep = EvalReport {
            label: "Mod.ConvNeXt-T+CBAM+Seg.".into(),
            pred_dir: "p".into(),
            gt_dir: "g".into(),
            annotations: "a.json".into(),
            params: LocalizeParams::for_sigma(2.0),
            sigma: SigmaPolicy::default(),
            metrics: MetricsReport {
                psnr: 31.2,
                ssim: 0.938,
                mae: 18.1,
                rmse: 23.8,
                pmae: 13.7,
                map: 1.0,
                mar: 0.79,
                per_image: vec![],
            },
        };
        let t = render_table(&[rep.clone(), rep]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("| Mod.ConvNeXt-T+CBAM+Seg. | 31.20 | 0.938 | 18.10 | 23.80 | 13.7 | 1.00 | 0.79 |"));
    }
}
