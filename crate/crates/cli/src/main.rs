//! Batch front end for the latent fingerprint enhancement pipeline.
//!
//! Subcommands: `enhance`, `groundtruth`, `segment`, `augment`, `train-toy`,
//! `eval`. Configuration comes from defaults, then a TOML file (`--config`
//! or `$ULPRINT_CONFIG`), then command-line flags. Exit codes: 0 ok,
//! 1 partial failure, 2 input error, 3 model error, 4 config error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use config::PipelineConfig;
use ulprint_core::augment::{augment_pair, rng_for_index};
use ulprint_core::guided::enhance_latent;
use ulprint_core::imagecore::{load_gray, load_mask, save_gray, save_mask, BinaryMask, GrayImage};
use ulprint_core::segnet::{
    iou, load_checkpoint, predict_with_fallback, save_checkpoint, toy_train, FileMaskSource,
    GaborMaskSource, MaskPredictor, ModelMaskSource,
};

const EXIT_PARTIAL: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_MODEL: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(
    name = "ulprint",
    version,
    about = "Latent fingerprint enhancement: guided blending, ridge masks, desk-scale segmentation"
)]
struct Cli {
    /// Configuration file (TOML); falls back to $ULPRINT_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for batch processing (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Enhance latents: predict a ridge mask, guided-filter, blend.
    Enhance(EnhanceArgs),
    /// Extract ground-truth ridge masks with the oriented Gabor pipeline.
    Groundtruth(GroundtruthArgs),
    /// Predict ridge masks only.
    Segment(SegmentArgs),
    /// Generate augmented (image, mask) pairs from a paired dataset.
    Augment(AugmentArgs),
    /// Train the toy segmentation network on a paired dataset.
    TrainToy(TrainToyArgs),
    /// Compare predicted masks against ground truth by IoU.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MaskSourceKind {
    /// Load masks from files next to the inputs (see --mask).
    File,
    /// Run the oriented-Gabor ground-truth pipeline.
    Gabor,
    /// Run a trained checkpoint (see --checkpoint).
    Model,
}

#[derive(clap::Args)]
struct EnhanceArgs {
    /// Latent image file or directory.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for <stem>.enhanced.png and <stem>.mask.png.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "gabor")]
    mask_source: MaskSourceKind,
    /// Mask file (single input) or directory of <stem>.mask.png files.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Trained checkpoint for --mask-source model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Guided filter radius override.
    #[arg(long)]
    r: Option<usize>,
    /// Guided filter regularization override.
    #[arg(long)]
    eps: Option<f64>,
    /// Final blend weight of the latent.
    #[arg(long)]
    w_latent: Option<f64>,
    /// Final blend weight of the guided image.
    #[arg(long)]
    w_guided: Option<f64>,
}

#[derive(clap::Args)]
struct GroundtruthArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Orientation/frequency block side override.
    #[arg(long)]
    block: Option<usize>,
    /// Minimum block coherence override.
    #[arg(long)]
    min_coherence: Option<f64>,
}

#[derive(clap::Args)]
struct SegmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "gabor")]
    mask_source: MaskSourceKind,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(clap::Args)]
struct AugmentArgs {
    /// Directory of <stem>.png images with <stem>.mask.png masks.
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Augmented variants per source pair.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Augmentation seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output patch side override.
    #[arg(long)]
    crop: Option<usize>,
}

#[derive(clap::Args)]
struct TrainToyArgs {
    /// Directory of <stem>.png images with <stem>.mask.png masks.
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss/IoU log path (default: <out>.log.tsv).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Train on the raw pairs without augmentation.
    #[arg(long, default_value_t = false)]
    no_augment: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth masks.
    #[arg(long)]
    truth: PathBuf,
    /// Report path (default: <pred>/iou_report.tsv).
    #[arg(long)]
    report: Option<PathBuf>,
}

/// A failure carrying its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn input(message: impl Into<String>) -> Self {
        Self::new(EXIT_INPUT, message)
    }

    fn model(message: impl Into<String>) -> Self {
        Self::new(EXIT_MODEL, message)
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let config_path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os("ULPRINT_CONFIG").map(PathBuf::from));
    let mut cfg = PipelineConfig::load(config_path.as_deref()).map_err(Failure::config)?;

    // Fold command-line overrides into the resolved configuration.
    if let Some(cmd) = &cli.command {
        apply_overrides(&mut cfg, cmd);
    }
    cfg.validate().map_err(Failure::config)?;

    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(0);
    }

    let Some(cmd) = cli.command else {
        return Err(Failure::input(
            "no subcommand given; see `ulprint --help`",
        ));
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.unwrap_or(0))
        .build()
        .map_err(|e| Failure::config(format!("cannot build worker pool: {e}")))?;

    match cmd {
        Command::Enhance(args) => cmd_enhance(&cfg, &pool, args),
        Command::Groundtruth(args) => cmd_groundtruth(&cfg, &pool, args),
        Command::Segment(args) => cmd_segment(&cfg, &pool, args),
        Command::Augment(args) => cmd_augment(&cfg, &pool, args),
        Command::TrainToy(args) => cmd_train_toy(&cfg, args),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn apply_overrides(cfg: &mut PipelineConfig, cmd: &Command) {
    match cmd {
        Command::Enhance(a) => {
            if let Some(r) = a.r {
                cfg.guided.r = r;
            }
            if let Some(eps) = a.eps {
                cfg.guided.eps = eps;
            }
            if let Some(w) = a.w_latent {
                cfg.guided.w_latent = w;
            }
            if let Some(w) = a.w_guided {
                cfg.guided.w_guided = w;
            }
        }
        Command::Groundtruth(a) => {
            if let Some(b) = a.block {
                cfg.gabor.block = b;
            }
            if let Some(c) = a.min_coherence {
                cfg.gabor.min_coherence = c;
            }
        }
        Command::Augment(a) => {
            if let Some(s) = a.seed {
                cfg.augment.seed = s;
            }
            if let Some(c) = a.crop {
                cfg.augment.crop = c;
            }
        }
        Command::TrainToy(a) => {
            if let Some(e) = a.epochs {
                cfg.segnet.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.segnet.lr = lr;
            }
            if let Some(s) = a.seed {
                cfg.segnet.seed = s;
                cfg.augment.seed = s;
            }
            if let Some(b) = a.batch_size {
                cfg.segnet.batch_size = b;
            }
        }
        Command::Segment(_) | Command::Eval(_) => {}
    }
}

/// Strips the extension plus any `.mask`/`.enhanced` role suffix.
fn stem_of(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    for suffix in [".mask", ".enhanced"] {
        if let Some(s) = stem.strip_suffix(suffix) {
            return s.to_string();
        }
    }
    stem
}

fn is_raster(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| {
            let e = e.to_ascii_lowercase();
            e == "png" || e == "pgm"
        })
        .unwrap_or(false)
}

fn is_role_file(path: &Path) -> bool {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    stem.ends_with(".mask") || stem.ends_with(".enhanced")
}

/// Lists plain raster inputs (masks and enhanced outputs excluded), sorted.
fn collect_inputs(path: &Path) -> Result<Vec<PathBuf>, Failure> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(Failure::input(format!(
            "input {} does not exist",
            path.display()
        )));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Failure::input(format!("cannot list {}: {e}", path.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_raster(p) && !is_role_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::input(format!(
            "no raster inputs in {}",
            path.display()
        )));
    }
    Ok(files)
}

/// Loads `<stem>.png` + `<stem>.mask.png` pairs from a dataset directory.
fn collect_pairs(dir: &Path) -> Result<Vec<(String, GrayImage, BinaryMask)>, Failure> {
    let images = collect_inputs(dir)?;
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for img_path in images {
        let stem = stem_of(&img_path);
        let mask_path = ["png", "pgm"]
            .iter()
            .map(|ext| dir.join(format!("{stem}.mask.{ext}")))
            .find(|p| p.exists());
        match mask_path {
            None => missing.push(stem),
            Some(mp) => {
                let img = load_gray(&img_path)
                    .map_err(|e| Failure::input(format!("{}: {e}", img_path.display())))?;
                let mask = load_mask(&mp)
                    .map_err(|e| Failure::input(format!("{}: {e}", mp.display())))?;
                pairs.push((stem, img, mask));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Failure::input(format!(
            "images without masks: {}",
            missing.join(", ")
        )));
    }
    if pairs.is_empty() {
        return Err(Failure::input(format!("no pairs in {}", dir.display())));
    }
    Ok(pairs)
}

fn ensure_out_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::input(format!("cannot create {}: {e}", dir.display())))
}

/// Runs `work` over the inputs on the worker pool and prints one line per
/// file in input order. Returns 0 if everything succeeded, 1 otherwise.
fn run_batch(
    inputs: &[PathBuf],
    pool: &rayon::ThreadPool,
    work: impl Fn(&Path) -> Result<String, String> + Sync,
) -> u8 {
    let results: Vec<Result<String, String>> =
        pool.install(|| inputs.par_iter().map(|p| work(p)).collect());
    let mut failures = 0usize;
    for (path, result) in inputs.iter().zip(results) {
        match result {
            Ok(line) => println!("{}: {line}", path.display()),
            Err(err) => {
                failures += 1;
                eprintln!("{}: error: {err}", path.display());
            }
        }
    }
    if failures > 0 {
        eprintln!("{failures}/{} files failed", inputs.len());
        EXIT_PARTIAL
    } else {
        0
    }
}

/// Builds the shared predictor for gabor/model sources; `file` sources are
/// resolved per input.
enum SharedPredictor {
    PerFile(PathBuf),
    Shared(Box<dyn MaskPredictor>),
}

fn build_predictor(
    cfg: &PipelineConfig,
    kind: MaskSourceKind,
    mask: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
) -> Result<SharedPredictor, Failure> {
    match kind {
        MaskSourceKind::File => {
            let mask = mask.as_ref().ok_or_else(|| {
                Failure::input("--mask-source file requires --mask <path>")
            })?;
            Ok(SharedPredictor::PerFile(mask.clone()))
        }
        MaskSourceKind::Gabor => Ok(SharedPredictor::Shared(Box::new(GaborMaskSource(
            cfg.groundtruth_config(),
        )))),
        MaskSourceKind::Model => {
            let ckpt = checkpoint.as_ref().ok_or_else(|| {
                Failure::model("--mask-source model requires --checkpoint <path>")
            })?;
            let net = load_checkpoint(ckpt)
                .map_err(|e| Failure::model(format!("{}: {e}", ckpt.display())))?;
            Ok(SharedPredictor::Shared(Box::new(ModelMaskSource(net))))
        }
    }
}

/// Finds the mask file for one input under a file-source mask path.
fn mask_for(mask_path: &Path, stem: &str) -> Result<BinaryMask, String> {
    if mask_path.is_file() {
        return load_mask(mask_path).map_err(|e| e.to_string());
    }
    for candidate in [
        format!("{stem}.mask.png"),
        format!("{stem}.mask.pgm"),
        format!("{stem}.png"),
        format!("{stem}.pgm"),
    ] {
        let p = mask_path.join(candidate);
        if p.exists() {
            return load_mask(&p).map_err(|e| e.to_string());
        }
    }
    Err(format!(
        "no mask for stem '{stem}' under {}",
        mask_path.display()
    ))
}

fn predict_for(
    predictor: &SharedPredictor,
    latent: &GrayImage,
    stem: &str,
) -> Result<ulprint_core::segnet::FallbackOutcome, String> {
    match predictor {
        SharedPredictor::PerFile(mask_path) => {
            let source = FileMaskSource(mask_for(mask_path, stem)?);
            predict_with_fallback(latent, &source).map_err(|e| e.to_string())
        }
        SharedPredictor::Shared(p) => {
            predict_with_fallback(latent, p.as_ref()).map_err(|e| e.to_string())
        }
    }
}

fn cmd_enhance(
    cfg: &PipelineConfig,
    pool: &rayon::ThreadPool,
    args: EnhanceArgs,
) -> Result<u8, Failure> {
    let inputs = collect_inputs(&args.input)?;
    ensure_out_dir(&args.out_dir)?;
    let predictor = build_predictor(cfg, args.mask_source, &args.mask, &args.checkpoint)?;
    let guided = cfg.guided.clone();
    let out_dir = args.out_dir.clone();

    Ok(run_batch(&inputs, pool, |path| {
        let stem = stem_of(path);
        let latent = load_gray(path).map_err(|e| e.to_string())?;
        let outcome = predict_for(&predictor, &latent, &stem)?;
        let enhanced = enhance_latent(&latent, &outcome.mask, &guided).map_err(|e| e.to_string())?;
        save_gray(&enhanced, out_dir.join(format!("{stem}.enhanced.png")))
            .map_err(|e| e.to_string())?;
        save_mask(&outcome.mask, out_dir.join(format!("{stem}.mask.png")))
            .map_err(|e| e.to_string())?;
        Ok(format!(
            "white_ratio={:.4} fallback_triggered={} fallback_used={}",
            outcome.white_ratio,
            if outcome.fallback_attempted { "yes" } else { "no" },
            if outcome.fallback_used { "yes" } else { "no" },
        ))
    }))
}

fn cmd_segment(
    cfg: &PipelineConfig,
    pool: &rayon::ThreadPool,
    args: SegmentArgs,
) -> Result<u8, Failure> {
    let inputs = collect_inputs(&args.input)?;
    ensure_out_dir(&args.out_dir)?;
    let predictor = build_predictor(cfg, args.mask_source, &args.mask, &args.checkpoint)?;
    let out_dir = args.out_dir.clone();

    Ok(run_batch(&inputs, pool, |path| {
        let stem = stem_of(path);
        let latent = load_gray(path).map_err(|e| e.to_string())?;
        let outcome = predict_for(&predictor, &latent, &stem)?;
        save_mask(&outcome.mask, out_dir.join(format!("{stem}.mask.png")))
            .map_err(|e| e.to_string())?;
        Ok(format!(
            "white_ratio={:.4} fallback_triggered={}",
            outcome.white_ratio,
            if outcome.fallback_attempted { "yes" } else { "no" },
        ))
    }))
}

fn cmd_groundtruth(
    cfg: &PipelineConfig,
    pool: &rayon::ThreadPool,
    args: GroundtruthArgs,
) -> Result<u8, Failure> {
    let inputs = collect_inputs(&args.input)?;
    ensure_out_dir(&args.out_dir)?;
    let gt_cfg = cfg.groundtruth_config();
    let out_dir = args.out_dir.clone();

    Ok(run_batch(&inputs, pool, |path| {
        let stem = stem_of(path);
        let latent = load_gray(path).map_err(|e| e.to_string())?;
        let mask =
            ulprint_core::gabor::make_groundtruth(&latent, &gt_cfg).map_err(|e| e.to_string())?;
        save_mask(&mask, out_dir.join(format!("{stem}.mask.png"))).map_err(|e| e.to_string())?;
        let ratio = ulprint_core::imagecore::white_ratio(&mask);
        let warn = if mask.count_ones() == 0 {
            " warning=empty-mask"
        } else {
            ""
        };
        Ok(format!("white_ratio={ratio:.4}{warn}"))
    }))
}

fn cmd_augment(
    cfg: &PipelineConfig,
    pool: &rayon::ThreadPool,
    args: AugmentArgs,
) -> Result<u8, Failure> {
    if args.count == 0 {
        return Err(Failure::input("--count must be >= 1"));
    }
    let pairs = collect_pairs(&args.input_dir)?;
    ensure_out_dir(&args.out_dir)?;
    let acfg = cfg.augment.clone();
    let out_dir = args.out_dir.clone();

    // One deterministic stream per (source, variant) regardless of workers.
    let jobs: Vec<(usize, usize)> = (0..pairs.len())
        .flat_map(|i| (0..args.count).map(move |k| (i, k)))
        .collect();
    let results: Vec<Result<(), String>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, k)| {
                let (stem, img, mask) = &pairs[i];
                let stream = (i * args.count + k) as u64;
                let mut rng = rng_for_index(acfg.seed, stream);
                let (aimg, amask, _) =
                    augment_pair(img, mask, &acfg, &mut rng).map_err(|e| e.to_string())?;
                save_gray(&aimg, out_dir.join(format!("{stem}_aug{k:03}.png")))
                    .map_err(|e| e.to_string())?;
                save_mask(&amask, out_dir.join(format!("{stem}_aug{k:03}.mask.png")))
                    .map_err(|e| e.to_string())?;
                Ok(())
            })
            .collect()
    });
    let mut failures = 0;
    for ((i, k), result) in jobs.iter().zip(results) {
        if let Err(e) = result {
            failures += 1;
            eprintln!("{}[{k}]: error: {e}", pairs[*i].0);
        }
    }
    println!(
        "augmented {} pairs x{} -> {}",
        pairs.len(),
        args.count,
        args.out_dir.display()
    );
    Ok(if failures > 0 { EXIT_PARTIAL } else { 0 })
}

fn cmd_train_toy(cfg: &PipelineConfig, args: TrainToyArgs) -> Result<u8, Failure> {
    let pairs = collect_pairs(&args.dataset)?;
    let dataset: Vec<(GrayImage, BinaryMask)> =
        pairs.into_iter().map(|(_, img, mask)| (img, mask)).collect();

    let net_cfg = cfg.segnet.net_config();
    let augment = if args.no_augment {
        None
    } else {
        Some(cfg.augment.clone())
    };
    let train_cfg = cfg.segnet.train_config(augment);

    let (net, report) = toy_train(&dataset, &net_cfg, &train_cfg)
        .map_err(|e| Failure::model(format!("training failed: {e}")))?;

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Failure::model(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    save_checkpoint(&net, &args.out)
        .map_err(|e| Failure::model(format!("{}: {e}", args.out.display())))?;

    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.as_os_str().to_owned();
        p.push(".log.tsv");
        PathBuf::from(p)
    });
    let mut log = String::from("epoch\ttrain_loss\tval_iou\n");
    for e in &report.epochs {
        log.push_str(&format!("{}\t{:.12e}\t{:.12e}\n", e.epoch, e.train_loss, e.val_iou));
    }
    std::fs::write(&log_path, log)
        .map_err(|e| Failure::model(format!("{}: {e}", log_path.display())))?;

    for e in &report.epochs {
        println!(
            "epoch {}: loss {:.6} val_iou {:.6}",
            e.epoch, e.train_loss, e.val_iou
        );
    }
    match report.best_epoch {
        Some(best) => println!("best epoch {best}: val_iou {:.6}", report.best_iou),
        None => println!("no epochs run; checkpoint holds the initialization"),
    }
    println!("checkpoint: {}", args.out.display());
    println!("log: {}", log_path.display());
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<u8, Failure> {
    let list_masks = |dir: &Path| -> Result<Vec<(String, PathBuf)>, Failure> {
        if !dir.is_dir() {
            return Err(Failure::input(format!("{} is not a directory", dir.display())));
        }
        let mut out: Vec<(String, PathBuf)> = std::fs::read_dir(dir)
            .map_err(|e| Failure::input(format!("cannot list {}: {e}", dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_raster(p))
            .filter(|p| {
                // Prefer explicit mask files; fall back to plain rasters.
                let s = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                !s.ends_with(".enhanced")
            })
            .map(|p| (stem_of(&p), p))
            .collect();
        out.sort();
        out.dedup_by(|a, b| a.0 == b.0);
        Ok(out)
    };

    let preds = list_masks(&args.pred)?;
    let truths = list_masks(&args.truth)?;
    let pred_map: std::collections::BTreeMap<_, _> = preds.into_iter().collect();
    let truth_map: std::collections::BTreeMap<_, _> = truths.into_iter().collect();

    let mut unmatched: Vec<String> = Vec::new();
    for stem in pred_map.keys() {
        if !truth_map.contains_key(stem) {
            unmatched.push(format!("{stem} (prediction only)"));
        }
    }
    for stem in truth_map.keys() {
        if !pred_map.contains_key(stem) {
            unmatched.push(format!("{stem} (truth only)"));
        }
    }

    let mut rows = Vec::new();
    let mut sum = 0.0;
    for (stem, pred_path) in &pred_map {
        let Some(truth_path) = truth_map.get(stem) else {
            continue;
        };
        let pred = load_mask(pred_path)
            .map_err(|e| Failure::input(format!("{}: {e}", pred_path.display())))?;
        let truth = load_mask(truth_path)
            .map_err(|e| Failure::input(format!("{}: {e}", truth_path.display())))?;
        let score = iou(&pred, &truth)
            .map_err(|e| Failure::input(format!("{stem}: {e}")))?;
        sum += score;
        rows.push((stem.clone(), score));
    }
    if rows.is_empty() {
        return Err(Failure::input("no matching stems to evaluate"));
    }
    let mean = sum / rows.len() as f64;

    let mut report = String::from("stem\tiou\n");
    for (stem, score) in &rows {
        println!("{stem}\tiou={score:.6}");
        report.push_str(&format!("{stem}\t{score:.6}\n"));
    }
    println!("mean_iou={mean:.6} over {} files", rows.len());
    report.push_str(&format!("mean\t{mean:.6}\n"));

    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.pred.join("iou_report.tsv"));
    std::fs::write(&report_path, report)
        .map_err(|e| Failure::input(format!("{}: {e}", report_path.display())))?;

    if !unmatched.is_empty() {
        for u in &unmatched {
            eprintln!("unmatched: {u}");
        }
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}
