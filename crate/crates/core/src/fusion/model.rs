//! The assembled network: three branches, three encoders, fusion and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    fuse_with, CrossMode, CrossProj, Encoder, FusionError, FusionMode, HeadVars, Heads, ModelConfig, Result,
    NUM_TYPES,
};
use crate::branch::high::{HighBranch, HighFeatures, HighOptions};
use crate::branch::low::{low_features_graph, LowBranch, LowFeatures};
use crate::branch::mid::{mid_planes_graph, segment, MidBranch, MidFeatures, SegmentMap};
use crate::branch::Field;
use crate::image::{ImagePlane, ImageRGB};
use crate::layers::{Binder, Linear, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Inputs of all three branches for one image, precomputed once.
#[derive(Clone, Debug)]
pub struct SampleFeatures {
    pub low: LowFeatures,
    /// `[H, W, 5]`, see [`MidFeatures::to_tensor`].
    pub mid: Tensor,
    /// `[H, W, 4]`, see [`HighFeatures::to_tensor`].
    pub high: Tensor,
}

impl SampleFeatures {
    /// `seg` defaults to the built-in k-means segmentation with the
    /// configured `k` and seed. `high.lambda` is taken from the config.
    pub fn extract(
        img: &ImageRGB,
        config: &ModelConfig,
        seg: Option<&SegmentMap>,
        high: &HighOptions,
    ) -> Result<Self> {
        Self::extract_active(img, config, seg, high, [true; 3])
    }

    /// Like [`SampleFeatures::extract`], but inputs of inactive branches are
    /// left as zeros of the right shape and cost nothing to compute.
    pub fn extract_active(
        img: &ImageRGB,
        config: &ModelConfig,
        seg: Option<&SegmentMap>,
        high: &HighOptions,
        active: [bool; 3],
    ) -> Result<Self> {
        let n = config.image_size;
        if (img.width(), img.height()) != (n, n) {
            return Err(FusionError::Shape(format!(
                "model input is {n}x{n}, image is {}x{}",
                img.width(),
                img.height()
            )));
        }
        let low = if active[0] {
            LowFeatures::extract(img)?
        } else {
            LowFeatures {
                dct: Tensor::zeros(&[n / 8, n / 8, 64]),
                dwt: Tensor::zeros(&[n / 2, n / 2, 3]),
                srm: Tensor::zeros(&[n, n, crate::branch::SRM_KERNELS.len()]),
            }
        };
        let owned;
        let seg = match seg {
            Some(s) => Some(s),
            None if active[1] || active[2] => {
                owned = segment(img, config.seg_k, config.seg_seed)?;
                Some(&owned)
            }
            None => None,
        };
        let mid = match seg {
            Some(seg) if active[1] => MidFeatures::extract(img, seg)?.to_tensor(),
            _ => Tensor::zeros(&[n, n, 5]),
        };
        let high = match seg {
            Some(seg) if active[2] => {
                let opts = HighOptions {
                    lambda: config.depth_lambda,
                    ..high.clone()
                };
                HighFeatures::extract(img, seg, &opts)?.to_tensor()
            }
            _ => Tensor::zeros(&[n, n, 4]),
        };
        Ok(Self { low, mid, high })
    }
}

/// Which branches take part and whether the cross terms are added.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// `[low, mid, high]`; an inactive branch is not evaluated and every
    /// fusion term involving it is dropped.
    pub active: [bool; 3],
    pub cross_terms: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            active: [true; 3],
            cross_terms: true,
        }
    }
}

impl ForwardOptions {
    pub fn only(branch: usize) -> Self {
        let mut active = [false; 3];
        active[branch] = true;
        Self {
            active,
            cross_terms: true,
        }
    }
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub heads: HeadVars,
    pub fused: Var,
    /// Branch tokens before encoding, `[B * G^2, d]`.
    pub tokens: [Option<Var>; 3],
    pub encoded: [Option<Var>; 3],
}

/// Per-image predictions.
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    pub y_hat: [f64; 2],
    pub mask_hat: ImagePlane,
    pub type_hat: [f64; NUM_TYPES],
    /// `G x G` token norms per active branch, before encoding.
    pub token_norms: [Option<Field>; 3],
}

impl ModelOutputs {
    pub fn p_fake(&self) -> f64 {
        self.y_hat[1]
    }

    /// Most probable type index; the first wins ties.
    pub fn predicted_type(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.type_hat.iter().enumerate() {
            if p > self.type_hat[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    low: LowBranch,
    mid: MidBranch,
    high: HighBranch,
    encoders: [Encoder; 3],
    cross: Option<[CrossProj; 3]>,
    concat: Option<Linear>,
    heads: Heads,
}

impl Model {
    /// Fresh parameters drawn from a ChaCha8 stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let low = LowBranch::new(&mut store, &mut rng, d);
        let mid = MidBranch::new(&mut store, &mut rng, d);
        let high = HighBranch::new(&mut store, &mut rng, d);
        let shape = config.encoder_shape();
        let encoders = [
            Encoder::new(&mut store, &mut rng, "enc.low", shape)?,
            Encoder::new(&mut store, &mut rng, "enc.mid", shape)?,
            Encoder::new(&mut store, &mut rng, "enc.high", shape)?,
        ];
        let cross = match (config.fusion, config.cross) {
            (FusionMode::CrossAttention, CrossMode::Projected) => Some([
                CrossProj::new(&mut store, &mut rng, "cross.lm", d),
                CrossProj::new(&mut store, &mut rng, "cross.mh", d),
                CrossProj::new(&mut store, &mut rng, "cross.lh", d),
            ]),
            _ => None,
        };
        let concat = (config.fusion == FusionMode::Concat)
            .then(|| Linear::new(&mut store, &mut rng, "fuse.concat", 3 * d, d));
        let heads = Heads::new(&mut store, &mut rng, d);
        Ok(Self {
            config,
            store,
            low,
            mid,
            high,
            encoders,
            cross,
            concat,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self, branch: usize) -> &Encoder {
        &self.encoders[branch]
    }

    pub fn extract(&self, img: &ImageRGB) -> Result<SampleFeatures> {
        SampleFeatures::extract(img, &self.config, None, &HighOptions::default())
    }

    /// Fits every branch's input standardization to training features.
    pub fn fit_norms(&mut self, feats: &[&SampleFeatures]) {
        let low: Vec<&LowFeatures> = feats.iter().map(|f| &f.low).collect();
        self.low.fit_norms(&mut self.store, &low);
        let mid: Vec<&Tensor> = feats.iter().map(|f| &f.mid).collect();
        self.mid.fit_norms(&mut self.store, &mid);
        let high: Vec<&Tensor> = feats.iter().map(|f| &f.high).collect();
        self.high.fit_norms(&mut self.store, &high);
    }

    /// Records the batched forward pass. With `images` (one `[H, W, 3]`
    /// variable per sample), the low branch and the Sobel/LoG planes are
    /// recomputed from them so gradients reach the pixels; the remaining
    /// planes come from `feats`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &mut Binder<'_>,
        feats: &[&SampleFeatures],
        images: Option<&[Var]>,
        opts: &ForwardOptions,
    ) -> Result<ForwardPass> {
        let batch = feats.len();
        if batch == 0 {
            return Err(FusionError::Shape("empty batch".into()));
        }
        if images.is_some_and(|im| im.len() != batch) {
            return Err(FusionError::Shape("one image variable per sample required".into()));
        }
        if !opts.active.iter().any(|&a| a) {
            return Err(FusionError::Config("at least one branch must be active".into()));
        }
        let grid = self.config.grid;
        let mut tokens = [None; 3];
        let mut encoded = [None; 3];
        for branch in 0..3 {
            if !opts.active[branch] {
                continue;
            }
            let mut per_sample = Vec::with_capacity(batch);
            for (i, f) in feats.iter().enumerate() {
                let rgb = images.map(|im| im[i]);
                let t = match branch {
                    0 => {
                        let x = match rgb {
                            Some(rgb) => low_features_graph(g, rgb)?,
                            None => f.low.bind(g),
                        };
                        self.low.forward(g, p, x, grid)?
                    }
                    1 => {
                        let x = match rgb {
                            Some(rgb) => mid_planes_graph(g, rgb, &f.mid)?,
                            None => g.constant(f.mid.clone()),
                        };
                        self.mid.forward(g, p, x, grid)?
                    }
                    _ => {
                        let x = g.constant(f.high.clone());
                        self.high.forward(g, p, x, grid)?
                    }
                };
                per_sample.push(t);
            }
            let t = if batch == 1 { per_sample[0] } else { g.concat_rows(&per_sample)? };
            tokens[branch] = Some(t);
            encoded[branch] = Some(self.encoders[branch].forward(g, p, t, batch, grid)?.0);
        }
        let fused = match &self.concat {
            None => fuse_with(g, encoded, opts.cross_terms, |g, pair, q, k| match &self.cross {
                Some(proj) => proj[pair].forward(g, p, q, k, batch),
                None => super::cross_attention(g, q, k, batch),
            })?,
            Some(lin) => {
                let rows = batch * grid * grid;
                let parts: Vec<Var> = encoded
                    .iter()
                    .map(|h| h.unwrap_or_else(|| g.constant(Tensor::zeros(&[rows, self.config.d_model]))))
                    .collect();
                let cat = g.concat_last(&parts)?;
                lin.forward(g, p, cat)?
            }
        };
        let heads = self.heads.forward(g, p, fused, batch, grid, self.config.image_size)?;
        Ok(ForwardPass {
            heads,
            fused,
            tokens,
            encoded,
        })
    }

    /// Inference without gradients, in parallel chunks.
    pub fn predict(&self, feats: &[&SampleFeatures], opts: &ForwardOptions) -> Result<Vec<ModelOutputs>> {
        const CHUNK: usize = 16;
        let chunks: Vec<Vec<ModelOutputs>> = feats
            .par_chunks(CHUNK)
            .map(|chunk| self.predict_chunk(chunk, opts))
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    fn predict_chunk(&self, feats: &[&SampleFeatures], opts: &ForwardOptions) -> Result<Vec<ModelOutputs>> {
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, false);
        let pass = self.forward(&mut g, &mut p, feats, None, opts)?;
        let (n, grid) = (self.config.image_size, self.config.grid);
        let cells = grid * grid;
        let y = g.value(pass.heads.y).data();
        let m = g.value(pass.heads.mask).data();
        let t = g.value(pass.heads.typ).data();
        let mut out = Vec::with_capacity(feats.len());
        for i in 0..feats.len() {
            let token_norms = std::array::from_fn(|b| {
                pass.tokens[b].map(|v| {
                    let d = self.config.d_model;
                    let data = &g.value(v).data()[i * cells * d..(i + 1) * cells * d];
                    let norms = data.chunks_exact(d).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
                    Field::new(grid, grid, norms).expect("grid sized")
                })
            });
            out.push(ModelOutputs {
                y_hat: [y[2 * i], y[2 * i + 1]],
                mask_hat: ImagePlane::new(n, n, m[i * n * n..(i + 1) * n * n].to_vec())
                    .map_err(|e| FusionError::Shape(e.to_string()))?,
                type_hat: std::array::from_fn(|c| t[i * NUM_TYPES + c]),
                token_norms,
            });
        }
        Ok(out)
    }
}
