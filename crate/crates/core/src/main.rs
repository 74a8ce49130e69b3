use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use forgeryscope::branch::high::{DepthMap, HighOptions};
use forgeryscope::branch::mid::SegmentMap;
use forgeryscope::branch::BranchError;
use forgeryscope::eval::{
    ablation_csv, ablation_suite, configure_threads, default_grid, evaluate, robustness_sweep, sweep_csv, EvalError,
};
use forgeryscope::fusion::{
    load_checkpoint, save_checkpoint, CheckpointError, ForwardOptions, FusionError, Model, SampleFeatures, FORGERY_TYPES,
};
use forgeryscope::gradcheck::{self, CheckResult, DEFAULT_TOLERANCE};
use forgeryscope::image::{load_image, resize_bilinear, resize_plane, save_plane, ImageError, ImagePlane, ImageRGB};
use forgeryscope::tensor::encode_fftn;
use forgeryscope::training::{
    load_dataset, prepare_data, save_dataset, train, write_metrics_csv, DatasetKind, ForgerySample, TrainConfig, TrainError,
};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "forgeryscope", version, about = "Multi-branch image forgery detection and localization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed for all randomness; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON training configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the desk-scale reference settings as the base config.
    #[arg(long, global = true)]
    reference: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Sets both the data and the model input size.
    #[arg(long, global = true)]
    image_size: Option<usize>,
    #[arg(long, global = true)]
    n_per_class: Option<usize>,
    #[arg(long, global = true)]
    val_per_class: Option<usize>,
    /// Directory with images/, masks/ and labels.csv instead of generated data.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_dataset)]
    dataset: Option<DatasetKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural train and validation sets.
    GenData,
    /// Train a model; writes metrics.csv and model.ffck.
    Train,
    /// Evaluate a checkpoint on the validation data.
    Eval(ModelArgs),
    /// Evaluate a checkpoint under JPEG and blur perturbations.
    Sweep(ModelArgs),
    /// Train and evaluate the full and single-branch models.
    Ablate,
    /// Classify and localize one image.
    Analyze(AnalyzeArgs),
    /// Dump the raw branch inputs of one image as FFTN tensors.
    Extract(ExtractArgs),
    /// Verify every backward rule against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct ExternalMaps {
    /// Label map (PGM, label = gray value) replacing the built-in segmentation.
    #[arg(long)]
    seg_map: Option<PathBuf>,
    /// Depth map (PGM, depth = gray / 255) replacing the built-in estimate.
    #[arg(long)]
    depth_map: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Also write per-branch token-norm heatmaps.
    #[arg(long)]
    branch_maps: bool,
    #[command(flatten)]
    maps: ExternalMaps,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    maps: ExternalMaps,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Largest accepted relative error.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Corrupts the backward rule of the named op.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn parse_dataset(s: &str) -> Result<DatasetKind, String> {
    match s {
        "toy" => Ok(DatasetKind::Toy),
        "spectral" => Ok(DatasetKind::Spectral),
        _ => Err(format!("unknown dataset {s:?} (expected toy or spectral)")),
    }
}

/// A failed run and its exit code.
#[derive(Debug)]
enum Failure {
    /// A verification did not pass.
    Check(String),
    Usage(String),
    Io(String),
    /// Model or checkpoint incompatible with the request.
    Model(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) | Failure::Other(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Model(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Usage(m) | Failure::Io(m) | Failure::Model(m) | Failure::Other(m) => m,
        }
    }
}

fn image_failure(e: ImageError) -> Failure {
    match e {
        ImageError::Io { .. } | ImageError::Decode { .. } | ImageError::UnsupportedFormat(_) => Failure::Io(e.to_string()),
        ImageError::TooSmall { .. } | ImageError::InvalidParameter(_) => Failure::Usage(e.to_string()),
        ImageError::BufferSize { .. } => Failure::Other(e.to_string()),
    }
}

fn branch_failure(e: BranchError) -> Failure {
    match e {
        BranchError::Image(e) => image_failure(e),
        BranchError::Dimensions(_) | BranchError::InvalidParameter(_) => Failure::Usage(e.to_string()),
        BranchError::Tensor(_) => Failure::Other(e.to_string()),
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Model(e.to_string()),
        }
    }
}

impl From<FusionError> for Failure {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Branch(e) => branch_failure(e),
            FusionError::Config(_) => Failure::Usage(e.to_string()),
            FusionError::Shape(_) => Failure::Model(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Failure::Usage(e.to_string()),
            TrainError::Io { .. } => Failure::Io(e.to_string()),
            TrainError::Data(_) => Failure::Io(e.to_string()),
            TrainError::Checkpoint(e) => e.into(),
            TrainError::Fusion(e) => e.into(),
            TrainError::Image(e) => image_failure(e),
            TrainError::Eval(e) => e.into(),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(e) => (*e).into(),
            EvalError::Fusion(e) => e.into(),
            EvalError::Image(e) => image_failure(e),
            EvalError::Io { .. } => Failure::Io(e.to_string()),
            EvalError::NoBranches => Failure::Usage(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn resolve_config(common: &Common) -> Result<TrainConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None if common.reference => TrainConfig::reference(),
        None => TrainConfig::default(),
    };
    let o = &common.overrides;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
        cfg.t_max = v;
        cfg.warmup_epochs = cfg.warmup_epochs.min(v);
        cfg.adversarial_epochs = cfg.adversarial_epochs.min(v - cfg.warmup_epochs.min(v));
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.image_size {
        cfg.image_size = v;
        cfg.model.image_size = v;
    }
    if let Some(v) = o.n_per_class {
        cfg.n_per_class = v;
    }
    if let Some(v) = o.val_per_class {
        cfg.val_per_class = v;
    }
    if let Some(v) = &o.data_dir {
        cfg.data_dir = Some(v.clone());
    }
    if let Some(v) = o.dataset {
        cfg.dataset = v;
    }
    Ok(cfg)
}

fn validated(cfg: &TrainConfig) -> Result<(), Failure> {
    let bad = cfg.problems();
    if bad.is_empty() {
        return Ok(());
    }
    let mut msg = String::from("invalid configuration:");
    for b in bad {
        msg.push_str("\n  ");
        msg.push_str(&b);
    }
    Err(Failure::Usage(msg))
}

fn print_config(cfg: &TrainConfig) {
    println!("config {}", serde_json::to_string(cfg).expect("config serializes"));
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    Ok(load_checkpoint(path)?)
}

/// Evaluation data: the configured directory resized to the model input,
/// or the generated validation split.
fn eval_samples(cfg: &TrainConfig, model: &Model) -> Result<Vec<ForgerySample>, Failure> {
    let size = model.config().image_size;
    match &cfg.data_dir {
        Some(dir) => Ok(load_dataset(dir, Some(size))?),
        None => {
            let cfg = TrainConfig {
                image_size: size,
                model: model.config().clone(),
                ..cfg.clone()
            };
            validated(&cfg)?;
            Ok(prepare_data(&cfg)?.val)
        }
    }
}

fn external_maps(maps: &ExternalMaps) -> Result<(Option<SegmentMap>, HighOptions), Failure> {
    let seg = maps.seg_map.as_ref().map(SegmentMap::from_pgm).transpose().map_err(branch_failure)?;
    let depth = maps.depth_map.as_ref().map(DepthMap::from_pgm).transpose().map_err(branch_failure)?;
    Ok((seg, HighOptions { depth, ..HighOptions::default() }))
}

/// The image at the model's input size.
fn fit_input(img: &ImageRGB, size: usize) -> Result<ImageRGB, Failure> {
    if (img.width(), img.height()) == (size, size) {
        return Ok(img.clone());
    }
    log::info!("resizing {}x{} input to {size}x{size}", img.width(), img.height());
    resize_bilinear(img, size, size).map_err(image_failure)
}

fn check_map_size(what: &str, (w, h): (usize, usize), size: usize) -> Result<(), Failure> {
    if (w, h) != (size, size) {
        return Err(Failure::Usage(format!("{what} is {w}x{h}; the model input is {size}x{size}")));
    }
    Ok(())
}

fn features(img: &ImageRGB, config: &forgeryscope::fusion::ModelConfig, maps: &ExternalMaps) -> Result<SampleFeatures, Failure> {
    let (seg, high) = external_maps(maps)?;
    let size = config.image_size;
    if let Some(s) = &seg {
        check_map_size("segmentation map", (s.width(), s.height()), size)?;
    }
    if let Some(d) = &high.depth {
        check_map_size("depth map", (d.field().width(), d.field().height()), size)?;
    }
    Ok(SampleFeatures::extract(img, config, seg.as_ref(), &high)?)
}

/// Scales a nonnegative map to `[0, 1]` by its maximum.
fn normalized(values: &[f64], w: usize, h: usize) -> Result<ImagePlane, Failure> {
    let max = values.iter().copied().fold(0.0, f64::max);
    let scaled = values.iter().map(|&v| if max > 0.0 { v / max } else { 0.0 }).collect();
    ImagePlane::new(w, h, scaled).map_err(image_failure)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    let cfg = resolve_config(common)?;
    std::fs::create_dir_all(&common.out).map_err(|e| io_failure(&common.out, e))?;
    let out = |name: &str| common.out.join(name);
    match cli.command {
        Command::GenData => {
            validated(&cfg)?;
            print_config(&cfg);
            let data = prepare_data(&cfg)?;
            save_dataset(&data.train, out("train"))?;
            save_dataset(&data.val, out("val"))?;
            println!("wrote {} training and {} validation samples", data.train.len(), data.val.len());
        }
        Command::Train => {
            validated(&cfg)?;
            print_config(&cfg);
            let data = prepare_data(&cfg)?;
            let outcome = train(&cfg, &data)?;
            write_metrics_csv(&outcome.log, out("metrics.csv"))?;
            save_checkpoint(&outcome.model, out("model.ffck"))?;
            write_file(&out("config.json"), serde_json::to_string_pretty(&cfg).expect("config serializes"))?;
            if let Some(last) = outcome.log.last() {
                println!("final acc_train={} acc_val={} iou_val={}", last.acc_train, last.acc_val, last.iou_val);
            }
        }
        Command::Eval(args) => {
            let model = load_model(&args.checkpoint)?;
            print_config(&cfg);
            let samples = eval_samples(&cfg, &model)?;
            let report = evaluate(&model, &samples, &ForwardOptions::default())?;
            print!("{}", report.summary());
            write_file(&out("eval.txt"), report.summary())?;
        }
        Command::Sweep(args) => {
            let model = load_model(&args.checkpoint)?;
            print_config(&cfg);
            let samples = eval_samples(&cfg, &model)?;
            let clean = evaluate(&model, &samples, &ForwardOptions::default())?;
            println!("clean accuracy {:.4}", clean.accuracy);
            let rows = robustness_sweep(&model, &samples, &default_grid(), &ForwardOptions::default())?;
            let csv = sweep_csv(&rows);
            print!("{csv}");
            write_file(&out("sweep.csv"), csv)?;
        }
        Command::Ablate => {
            validated(&cfg)?;
            print_config(&cfg);
            let data = prepare_data(&cfg)?;
            let rows = ablation_suite(&cfg, &data)?;
            let csv = ablation_csv(&rows);
            print!("{csv}");
            write_file(&out("ablation.csv"), csv)?;
        }
        Command::Analyze(args) => {
            let model = load_model(&args.checkpoint)?;
            print_config(&cfg);
            let img = load_image(&args.image).map_err(image_failure)?;
            let size = model.config().image_size;
            let input = fit_input(&img, size)?;
            let feats = features(&input, model.config(), &args.maps)?;
            let o = model.predict(&[&feats], &ForwardOptions::default())?.remove(0);
            let t = o.predicted_type();
            let verdict = if o.p_fake() >= 0.5 { "fake" } else { "real" };
            println!("verdict={verdict} p_fake={:.6} type={} p_type={:.6}", o.p_fake(), FORGERY_TYPES[t], o.type_hat[t]);
            let (w, h) = (img.width(), img.height());
            let mask = resize_plane(&o.mask_hat, w, h).map_err(image_failure)?;
            save_plane(&mask, out("mask.png")).map_err(image_failure)?;
            if args.branch_maps {
                for (name, field) in ["low", "mid", "high"].iter().zip(&o.token_norms) {
                    let Some(field) = field else { continue };
                    let plane = normalized(field.values(), field.width(), field.height())?;
                    let up = resize_plane(&plane, w, h).map_err(image_failure)?;
                    save_plane(&up, out(&format!("branch_{name}.png"))).map_err(image_failure)?;
                }
            }
        }
        Command::Extract(args) => {
            print_config(&cfg);
            let img = load_image(&args.image).map_err(image_failure)?;
            let input = fit_input(&img, cfg.model.image_size)?;
            cfg.model.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let f = features(&input, &cfg.model, &args.maps)?;
            for (name, t) in [
                ("low_dct", &f.low.dct),
                ("low_dwt", &f.low.dwt),
                ("low_srm", &f.low.srm),
                ("mid", &f.mid),
                ("high", &f.high),
            ] {
                write_file(&out(&format!("{name}.fftn")), encode_fftn(t))?;
                println!("{name} {:?}", t.shape());
            }
        }
        Command::Gradcheck(args) => {
            print_config(&cfg);
            let report = gradcheck::run_suite(cfg.seed, args.tolerance, args.inject_fault.as_deref())
                .map_err(|e| Failure::Other(e.to_string()))?;
            let failed: Vec<&CheckResult> = report.iter().filter(|r| !r.passed).collect();
            for r in &report {
                println!("{:<14} {:.3e} {}", r.name, r.worst, if r.passed { "ok" } else { "FAIL" });
            }
            if !failed.is_empty() {
                let names: Vec<&str> = failed.iter().map(|r| r.name.as_str()).collect();
                return Err(Failure::Check(format!("gradient check failed for: {}", names.join(", "))));
            }
            println!("all {} checks passed at tolerance {:e}", report.len(), args.tolerance);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_threads();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
