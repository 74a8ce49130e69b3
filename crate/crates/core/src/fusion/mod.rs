//! Branch encoders, pairwise cross-attention fusion, task heads, losses and
//! checkpoints.

mod checkpoint;
mod encoder;
mod model;


use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branch::BranchError;
use crate::layers::{Binder, Linear, ParamStore};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{positional_encoding, Encoder, EncoderShape};
pub use model::{ForwardOptions, ForwardPass, Model, ModelOutputs, SampleFeatures};

/// Forgery types, in class-index order.
pub const FORGERY_TYPES: [&str; 7] = ["real", "copy-move", "splicing", "retouching", "gan", "diffusion", "deepfake"];
pub const NUM_TYPES: usize = 7;
pub const DICE_EPS: f64 = 1.0;
pub const LAMBDA_DICE: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid target: {0}")]
    Target(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Branch(#[from] BranchError),
}

pub type Result<T> = std::result::Result<T, FusionError>;

/// How the three pairwise cross terms are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossMode {
    /// `softmax(Q K^T / sqrt(d)) K`, no learned weights, one head.
    Literal,
    /// Learned query, key and value projections per pair, one head.
    Projected,
}

/// How the encoded branches are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Sum of the encodings plus the pairwise cross terms.
    CrossAttention,
    /// Concatenate the encodings per token and project back to `d`.
    Concat,
}

/// Architecture and feature-extraction settings; echoed into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square network input.
    pub image_size: usize,
    /// Side of the token grid shared by all branches.
    pub grid: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub cross: CrossMode,
    pub fusion: FusionMode,
    pub seg_k: usize,
    pub seg_seed: u64,
    pub depth_lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            grid: 8,
            d_model: 256,
            heads: 8,
            layers: 4,
            ffn: 1024,
            cross: CrossMode::Literal,
            fusion: FusionMode::CrossAttention,
            seg_k: crate::branch::mid::SEG_K,
            seg_seed: 0,
            depth_lambda: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FusionError::Config(m));
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return bad(format!("image_size {} must be a positive multiple of 8", self.image_size));
        }
        if self.grid == 0 || self.grid > self.image_size {
            return bad(format!("grid {} must lie in [1, image_size]", self.grid));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("{} heads do not divide d_model {}", self.heads, self.d_model));
        }
        if self.d_model % 4 != 0 {
            return bad(format!("d_model {} must be a multiple of 4", self.d_model));
        }
        if self.ffn == 0 {
            return bad("ffn must be positive".into());
        }
        if !(1..=crate::branch::mid::SEG_MAX_K).contains(&self.seg_k) {
            return bad(format!("seg_k {} outside [1, 19]", self.seg_k));
        }
        if !(self.depth_lambda >= 0.0) {
            return bad(format!("depth_lambda {} must be >= 0", self.depth_lambda));
        }
        Ok(())
    }

    pub fn encoder_shape(&self) -> EncoderShape {
        EncoderShape {
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            ffn: self.ffn,
        }
    }
}

/// Literal cross-attention `softmax(Q K^T / sqrt(d)) K` for each of `batch`
/// independent sequence pairs. `q: [batch * nq, d]`, `k: [batch * nk, d]`.
pub fn cross_attention(g: &mut Graph, q: Var, k: Var, batch: usize) -> Result<Var> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(FusionError::Shape(format!("cross-attention between {sq:?} and {sk:?}")));
    }
    let scale = 1.0 / (sq[1] as f64).sqrt();
    Ok(g.attention(q, k, k, batch, 1, scale)?)
}

/// Learned single-head projections for one cross-attention pair.
#[derive(Clone, Debug)]
pub struct CrossProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl CrossProj {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::without_bias(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder<'_>, q: Var, k: Var, batch: usize) -> Result<Var> {
        let d = g.shape(q)[1];
        let qq = self.q.forward(g, p, q)?;
        let kk = self.k.forward(g, p, k)?;
        let vv = self.v.forward(g, p, k)?;
        Ok(g.attention(qq, kk, vv, batch, 1, 1.0 / (d as f64).sqrt())?)
    }
}

/// Index pairs `(query, key)` of the cross terms: low-mid, mid-high, low-high.
pub const CROSS_PAIRS: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];

/// `H_low + H_mid + H_high + C(low, mid) + C(mid, high) + C(low, high)`,
/// where `C` is [`cross_attention`]. Absent branches drop every term they
/// appear in; `cross_terms = false` keeps only the plain sum.
pub fn fuse(g: &mut Graph, h: [Option<Var>; 3], batch: usize, cross_terms: bool) -> Result<Var> {
    fuse_with(g, h, cross_terms, |g, _, q, k| cross_attention(g, q, k, batch))
}

pub(crate) fn fuse_with(
    g: &mut Graph,
    h: [Option<Var>; 3],
    cross_terms: bool,
    mut cross: impl FnMut(&mut Graph, usize, Var, Var) -> Result<Var>,
) -> Result<Var> {
    let present: Vec<Var> = h.iter().flatten().copied().collect();
    let Some(&first) = present.first() else {
        return Err(FusionError::Config("at least one branch must be active".into()));
    };
    for &v in &present[1..] {
        if g.shape(v) != g.shape(first) {
            return Err(FusionError::Shape(format!(
                "branch encodings differ: {:?} vs {:?}",
                g.shape(first),
                g.shape(v)
            )));
        }
    }
    let mut acc = first;
    for &v in &present[1..] {
        acc = g.add(acc, v)?;
    }
    if cross_terms {
        for (pair, (qi, ki)) in CROSS_PAIRS.into_iter().enumerate() {
            if let (Some(q), Some(k)) = (h[qi], h[ki]) {
                let c = cross(g, pair, q, k)?;
                acc = g.add(acc, c)?;
            }
        }
    }
    Ok(acc)
}

/// Detection, localization and type heads.
#[derive(Clone, Debug)]
pub struct Heads {
    pub cls: Linear,
    pub loc: Linear,
    pub typ: Linear,
}

/// Output variables of [`Heads::forward`].
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[B, 2]` probabilities; column 1 is the fake probability.
    pub y: Var,
    /// `[B, H, W, 1]` manipulation probabilities.
    pub mask: Var,
    /// `[B, 7]` type distribution.
    pub typ: Var,
    /// Pre-activation values of the three outputs above; the losses are
    /// evaluated from these.
    pub y_logits: Var,
    pub mask_logits: Var,
    pub typ_logits: Var,
}

impl Heads {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) -> Self {
        Self {
            cls: Linear::new(store, rng, "head.cls", d, 2),
            loc: Linear::new(store, rng, "head.loc", d, 1),
            typ: Linear::new(store, rng, "head.type", d, NUM_TYPES),
        }
    }

    /// `fused: [batch * grid^2, d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &mut Binder<'_>,
        fused: Var,
        batch: usize,
        grid: usize,
        image_size: usize,
    ) -> Result<HeadVars> {
        let s = g.shape(fused).to_vec();
        if s.len() != 2 || s[0] != batch * grid * grid {
            return Err(FusionError::Shape(format!(
                "heads expect [{} x d] tokens, got {s:?}",
                batch * grid * grid
            )));
        }
        let pooled = g.group_mean(fused, batch)?;
        let logits = self.cls.forward(g, p, pooled)?;
        let y = g.sigmoid(logits);
        let tl = self.typ.forward(g, p, pooled)?;
        let typ = g.softmax_rows(tl);
        let m = self.loc.forward(g, p, fused)?;
        let m = g.reshape(m, &[batch, grid, grid, 1])?;
        let m = g.resample(m, image_size, image_size)?;
        let mask = g.sigmoid(m);
        Ok(HeadVars {
            y,
            mask,
            typ,
            y_logits: logits,
            mask_logits: m,
            typ_logits: tl,
        })
    }
}

/// Weights of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub loc: f64,
    pub typ: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            loc: 0.5,
            typ: 0.3,
        }
    }
}

/// Supervision for a batch.
#[derive(Clone, Debug)]
pub struct Targets {
    /// 1 for manipulated, 0 for authentic.
    pub labels: Vec<u8>,
    /// `[B, H, W, 1]` binary masks.
    pub masks: Tensor,
    pub types: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub loc: f64,
    pub typ: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub loc: Var,
    pub typ: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0];
        LossBreakdown {
            cls: v(self.cls),
            loc: v(self.loc),
            typ: v(self.typ),
            total: v(self.total),
        }
    }
}

/// `w.cls * BCE(y_fake, label) + w.loc * (BCE(mask) + (1 - Dice)) + w.typ * NLL(type)`.
pub fn total_loss(g: &mut Graph, out: &HeadVars, t: &Targets, w: &LossWeights) -> Result<LossVars> {
    let b = g.shape(out.y)[0];
    if t.labels.len() != b || t.types.len() != b {
        return Err(FusionError::Target(format!(
            "{} labels and {} types for a batch of {b}",
            t.labels.len(),
            t.types.len()
        )));
    }
    if let Some(l) = t.labels.iter().find(|&&l| l > 1) {
        return Err(FusionError::Target(format!("label {l} outside {{0, 1}}")));
    }
    if let Some(c) = t.types.iter().find(|&&c| c >= NUM_TYPES) {
        return Err(FusionError::Target(format!("type {c} outside [0, {NUM_TYPES})")));
    }
    if t.masks.shape() != g.shape(out.mask) {
        return Err(FusionError::Target(format!(
            "mask target {:?} does not match prediction {:?}",
            t.masks.shape(),
            g.shape(out.mask)
        )));
    }
    // Cross-entropies come from the logits; their values equal the
    // probability forms, but their gradients survive saturation.
    let fake = g.slice_cols(out.y_logits, 1, 1)?;
    let labels = Tensor::new(vec![b], t.labels.iter().map(|&l| l as f64).collect())?;
    let cls = g.bce_logits_mean(fake, &labels)?;
    let bce = g.bce_logits_mean(out.mask_logits, &t.masks)?;
    let dice = g.dice_loss(out.mask, &t.masks, b, DICE_EPS)?;
    let dice = g.scale(dice, LAMBDA_DICE);
    let loc = g.add(bce, dice)?;
    let typ = g.cross_entropy_mean(out.typ_logits, &t.types)?;
    let a = g.scale(cls, w.cls);
    let l = g.scale(loc, w.loc);
    let ty = g.scale(typ, w.typ);
    let s = g.add(a, l)?;
    let total = g.add(s, ty)?;
    Ok(LossVars { total, cls, loc, typ })
}
