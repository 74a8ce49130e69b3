//! Procedural data, optimizer, schedule, adversarial perturbation and the
//! training loop.

mod dataset;
mod optim;
mod trainer;


use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::fusion::{CheckpointError, FusionError, LossWeights, ModelConfig};

pub use dataset::{
    gen_sample, gen_spectral_dataset, gen_toy_dataset, load_dataset, real_base, save_dataset, shuffle, ForgerySample,
    Rect, SampleMeta, COPY_MOVE, DEEPFAKE, DIFFUSION, GAN, REAL, RETOUCHING, SPLICING,
};
pub use optim::{adamw_step, cosine_lr, fgsm_perturb, AdamHyper, AdamState, AdamW};
pub use trainer::{
    extract_features, prepare_data, train, write_metrics_csv, EpochMetrics, TrainData, TrainOutcome, METRICS_HEADER,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {term} loss in epoch {epoch}, batch {batch}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which generator supplies the data when no directory is given.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// All seven manipulation types.
    Toy,
    /// Authentic vs checkerboard-fingerprinted images only.
    Spectral,
}

/// Training settings; mirrored field for field by the JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Cosine period in epochs.
    pub t_max: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub fgsm_eps: f64,
    /// Weights of the clean and adversarial losses.
    pub adv_mix: [f64; 2],
    pub loss_weights: LossWeights,
    pub image_size: usize,
    pub n_per_class: usize,
    pub val_per_class: usize,
    /// Leading epochs trained on the detection loss alone.
    pub warmup_epochs: usize,
    /// Trailing epochs that mix in the adversarial loss.
    pub adversarial_epochs: usize,
    /// `[low, mid, high]` branches taking part.
    pub branches: [bool; 3],
    pub dataset: DatasetKind,
    /// Directory with `images/`, `masks/` and `labels.csv`; replaces the
    /// generator when set.
    pub data_dir: Option<PathBuf>,
    /// Held-out share of a loaded directory.
    pub val_fraction: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_min: 0.0,
            weight_decay: 0.01,
            epochs: 30,
            t_max: 30,
            batch_size: 8,
            seed: 0,
            fgsm_eps: 0.03,
            adv_mix: [0.7, 0.3],
            loss_weights: LossWeights::default(),
            image_size: 64,
            n_per_class: 32,
            val_per_class: 8,
            warmup_epochs: 0,
            adversarial_epochs: 0,
            branches: [true; 3],
            dataset: DatasetKind::Toy,
            data_dir: None,
            val_fraction: 0.2,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The desk-scale reference run: 64x64 images, 32 per class, batch 8,
    /// 30 epochs at a learning rate of 1e-3.
    pub fn reference() -> Self {
        Self {
            lr: 1e-3,
            ..Self::default()
        }
    }

    /// Every violated constraint, one message per field.
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                bad.push(msg);
            }
        };
        need(self.lr > 0.0 && self.lr.is_finite(), format!("lr: {} must be positive", self.lr));
        need(self.lr_min >= 0.0 && self.lr_min <= self.lr, format!("lr_min: {} must lie in [0, lr]", self.lr_min));
        need(self.weight_decay >= 0.0, format!("weight_decay: {} must be >= 0", self.weight_decay));
        need(self.epochs > 0, "epochs: must be positive".into());
        need(self.t_max > 0, "t_max: must be positive".into());
        need(self.batch_size > 0, "batch_size: must be positive".into());
        need(self.fgsm_eps > 0.0 && self.fgsm_eps < 1.0, format!("fgsm_eps: {} must lie in (0, 1)", self.fgsm_eps));
        need(
            self.adv_mix.iter().all(|&w| w > 0.0) && (self.adv_mix[0] + self.adv_mix[1] - 1.0).abs() < 1e-12,
            format!("adv_mix: {:?} must be positive and sum to 1", self.adv_mix),
        );
        let w = &self.loss_weights;
        need(
            w.cls > 0.0 && w.loc > 0.0 && w.typ > 0.0,
            format!("loss_weights: ({}, {}, {}) must be positive", w.cls, w.loc, w.typ),
        );
        need(
            self.image_size >= 32 && self.image_size % 8 == 0,
            format!("image_size: {} must be at least 32 and a multiple of 8", self.image_size),
        );
        need(
            self.model.image_size == self.image_size,
            format!("model.image_size: {} differs from image_size {}", self.model.image_size, self.image_size),
        );
        need(self.n_per_class > 0, "n_per_class: must be positive".into());
        need(self.val_per_class > 0, "val_per_class: must be positive".into());
        need(
            self.warmup_epochs + self.adversarial_epochs <= self.epochs,
            "warmup_epochs + adversarial_epochs: exceed epochs".into(),
        );
        need(self.branches.iter().any(|&b| b), "branches: at least one must be enabled".into());
        need(
            self.val_fraction > 0.0 && self.val_fraction < 1.0,
            format!("val_fraction: {} must lie in (0, 1)", self.val_fraction),
        );
        if let Err(e) = self.model.validate() {
            bad.push(format!("model: {e}"));
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.problems();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(bad.join("; ")))
        }
    }
}
