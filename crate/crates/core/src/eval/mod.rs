//! Detection metrics and the robustness and ablation experiment drivers.

mod metrics;


use std::fmt::Write as _;
use std::path::Path;

use crate::fusion::{ForwardOptions, FusionError, Model, ModelOutputs, FORGERY_TYPES, NUM_TYPES};
use crate::image::{gaussian_blur, jpeg_simulate, ImageRGB};
use crate::training::{extract_features, train, ForgerySample, TrainConfig, TrainData, TrainError};

pub use metrics::{accuracy, auc_roc, f1_score, pixel_f1_iou};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("{scores} scores for {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("label {0} outside {{0, 1}}")]
    InvalidLabel(u8),
    #[error("AUC is undefined when only one class is present")]
    SingleClass,
    #[error("score {0} is not a number")]
    NonFinite(f64),
    #[error("prediction has {pred} pixels, ground truth {truth}")]
    Dimensions { pred: usize, truth: usize },
    #[error("all branches are disabled")]
    NoBranches,
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error(transparent)]
    Train(Box<TrainError>),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Train(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Caps rayon's global pool at `FF_THREADS` workers when the variable is
/// set. Returns the cap that was applied.
pub fn configure_threads() -> Option<usize> {
    let n = std::env::var("FF_THREADS").ok()?.trim().parse::<usize>().ok().filter(|&n| n > 0)?;
    // A pool that already exists keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Some(n)
}

/// Metrics of one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub n_real: usize,
    pub n_fake: usize,
    pub accuracy: f64,
    /// `None` when only one class is present.
    pub auc_roc: Option<f64>,
    pub f1: f64,
    /// Mean over manipulated samples; `None` without any.
    pub pixel_f1: Option<f64>,
    pub iou: Option<f64>,
    /// Type-prediction accuracy per true type; `None` for absent types.
    pub per_type_accuracy: [Option<f64>; NUM_TYPES],
    pub per_type_count: [usize; NUM_TYPES],
}

impl EvalReport {
    pub fn from_outputs(outs: &[ModelOutputs], samples: &[ForgerySample]) -> Result<Self> {
        if outs.len() != samples.len() {
            return Err(EvalError::Length {
                scores: outs.len(),
                labels: samples.len(),
            });
        }
        let scores: Vec<f64> = outs.iter().map(|o| o.p_fake()).collect();
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        let acc = accuracy(&scores, &labels, 0.5)?;
        let auc = match auc_roc(&scores, &labels) {
            Ok(a) => Some(a),
            Err(EvalError::SingleClass) => None,
            Err(e) => return Err(e),
        };
        let f1 = f1_score(&scores, &labels, 0.5)?;
        let mut pix = Vec::new();
        let mut hits = [0usize; NUM_TYPES];
        let mut counts = [0usize; NUM_TYPES];
        for (o, s) in outs.iter().zip(samples) {
            if s.label == 1 {
                pix.push(pixel_f1_iou(o.mask_hat.values(), s.mask.values(), 0.5)?);
            }
            counts[s.mtype] += 1;
            hits[s.mtype] += usize::from(o.predicted_type() == s.mtype);
        }
        let mean = |f: fn(&(f64, f64)) -> f64| (!pix.is_empty()).then(|| pix.iter().map(f).sum::<f64>() / pix.len() as f64);
        let n_fake = labels.iter().filter(|&&l| l == 1).count();
        Ok(Self {
            n: samples.len(),
            n_real: samples.len() - n_fake,
            n_fake,
            accuracy: acc,
            auc_roc: auc,
            f1,
            pixel_f1: mean(|p| p.0),
            iou: mean(|p| p.1),
            per_type_accuracy: std::array::from_fn(|c| (counts[c] > 0).then(|| hits[c] as f64 / counts[c] as f64)),
            per_type_count: counts,
        })
    }

    /// Human-readable multi-line summary.
    pub fn summary(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut s = format!(
            "samples {} (real {}, fake {})\naccuracy {:.4}  auc {}  f1 {:.4}\npixel_f1 {}  iou {}\n",
            self.n,
            self.n_real,
            self.n_fake,
            self.accuracy,
            opt(self.auc_roc),
            self.f1,
            opt(self.pixel_f1),
            opt(self.iou)
        );
        for (c, name) in FORGERY_TYPES.iter().enumerate() {
            if let Some(a) = self.per_type_accuracy[c] {
                writeln!(s, "type {name:<11} n={:<4} acc {a:.4}", self.per_type_count[c]).expect("string write");
            }
        }
        s
    }
}

fn csv_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// Runs the model over `samples` and scores the predictions.
pub fn evaluate(model: &Model, samples: &[ForgerySample], opts: &ForwardOptions) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let feats = extract_features(samples, model.config(), opts.active)?;
    let outs = model.predict(&feats.iter().collect::<Vec<_>>(), opts)?;
    EvalReport::from_outputs(&outs, samples)
}

/// A post-processing applied before evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    Jpeg(u8),
    Blur(f64),
}

impl Perturbation {
    pub fn apply(&self, img: &ImageRGB) -> Result<ImageRGB> {
        Ok(match *self {
            Perturbation::Jpeg(q) => jpeg_simulate(img, q)?,
            Perturbation::Blur(s) => gaussian_blur(img, s)?,
        })
    }

    fn kind_param(&self) -> (&'static str, String) {
        match *self {
            Perturbation::Jpeg(q) => ("jpeg", q.to_string()),
            Perturbation::Blur(s) => ("blur", s.to_string()),
        }
    }
}

/// JPEG qualities 70, 80, 90, 95, 100, then blur sigmas 0.5, 1, 2.
pub fn default_grid() -> Vec<Perturbation> {
    let mut g: Vec<Perturbation> = [70, 80, 90, 95, 100].into_iter().map(Perturbation::Jpeg).collect();
    g.extend([0.5, 1.0, 2.0].into_iter().map(Perturbation::Blur));
    g
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub perturbation: Perturbation,
    pub report: EvalReport,
}

/// Evaluates the model once per grid point on perturbed copies of `samples`.
/// Masks and labels are unchanged.
pub fn robustness_sweep(model: &Model, samples: &[ForgerySample], grid: &[Perturbation], opts: &ForwardOptions) -> Result<Vec<SweepRow>> {
    grid.iter()
        .map(|pert| {
            let perturbed: Vec<ForgerySample> = samples
                .iter()
                .map(|s| {
                    Ok(ForgerySample {
                        image: pert.apply(&s.image)?,
                        ..s.clone()
                    })
                })
                .collect::<Result<_>>()?;
            let report = evaluate(model, &perturbed, opts)?;
            log::info!("{:?}: accuracy {:.4}", pert, report.accuracy);
            Ok(SweepRow {
                perturbation: *pert,
                report,
            })
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "perturbation,param,accuracy,auc_roc,f1,pixel_f1,iou";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let (kind, param) = r.perturbation.kind_param();
        let e = &r.report;
        writeln!(s, "{kind},{param},{},{},{},{},{}", e.accuracy, csv_opt(e.auc_roc), e.f1, csv_opt(e.pixel_f1), csv_opt(e.iou))
            .expect("string write");
    }
    s
}

/// Name of a branch mask, such as `low+high`.
pub fn mask_name(mask: [bool; 3]) -> String {
    let names: Vec<&str> = ["low", "mid", "high"].iter().zip(mask).filter(|(_, on)| *on).map(|(n, _)| *n).collect();
    if names.len() == 3 {
        "full".into()
    } else {
        names.join("+")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub branches: [bool; 3],
    pub report: EvalReport,
}

/// Trains with only the `branches` enabled and evaluates on the validation split.
pub fn ablation_run(cfg: &TrainConfig, data: &TrainData, branches: [bool; 3]) -> Result<AblationRow> {
    if !branches.iter().any(|&b| b) {
        return Err(EvalError::NoBranches);
    }
    let cfg = TrainConfig {
        branches,
        ..cfg.clone()
    };
    let outcome = train(&cfg, data)?;
    let opts = ForwardOptions {
        active: branches,
        cross_terms: true,
    };
    let report = evaluate(&outcome.model, &data.val, &opts)?;
    log::info!("ablation {}: accuracy {:.4}", mask_name(branches), report.accuracy);
    Ok(AblationRow { branches, report })
}

/// The full model followed by each single-branch model.
pub const ABLATION_MASKS: [[bool; 3]; 4] = [[true; 3], [true, false, false], [false, true, false], [false, false, true]];

pub fn ablation_suite(cfg: &TrainConfig, data: &TrainData) -> Result<Vec<AblationRow>> {
    ABLATION_MASKS.iter().map(|&m| ablation_run(cfg, data, m)).collect()
}

pub const ABLATION_HEADER: &str = "config,accuracy,auc_roc,f1,pixel_f1,iou";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let e = &r.report;
        writeln!(s, "{},{},{},{},{},{}", mask_name(r.branches), e.accuracy, csv_opt(e.auc_roc), e.f1, csv_opt(e.pixel_f1), csv_opt(e.iou))
            .expect("string write");
    }
    s
}

/// Writes `contents` to `path`, mapping failures to [`EvalError::Io`].
pub fn write_text(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, contents).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}
