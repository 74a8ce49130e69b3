//! The end-to-end training loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dataset::{gen_spectral_dataset, gen_toy_dataset, load_dataset, shuffle, ForgerySample};
use super::optim::{cosine_lr, fgsm_perturb, AdamHyper, AdamW};
use super::{DatasetKind, Result, TrainConfig, TrainError};
use crate::branch::high::HighOptions;
use crate::branch::image_tensor;
use crate::eval::{accuracy, pixel_f1_iou};
use crate::fusion::{total_loss, ForwardOptions, LossBreakdown, LossWeights, Model, ModelConfig, SampleFeatures, Targets};
use crate::image::ImageRGB;
use crate::layers::Binder;
use crate::tensor::{Graph, Tensor, Var};

pub const METRICS_HEADER: &str = "epoch,lr,l_cls,l_loc,l_type,l_total,acc_train,acc_val,iou_val";

/// Stream salts keep the data, validation and shuffle generators independent
/// while all derive from the single configured seed.
const VAL_SALT: u64 = 0x5eed_0000_0000_0001;
const SHUFFLE_SALT: u64 = 0x5eed_0000_0000_0002;
const SPLIT_SALT: u64 = 0x5eed_0000_0000_0003;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_loc: f64,
    pub l_type: f64,
    pub l_total: f64,
    /// Detection accuracy of the predictions made while training the epoch.
    pub acc_train: f64,
    pub acc_val: f64,
    /// Mean pixel IoU over manipulated validation samples, 0 if there are none.
    pub iou_val: f64,
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<ForgerySample>,
    pub val: Vec<ForgerySample>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochMetrics>,
}

/// Generates (or loads and splits) the training and validation sets.
pub fn prepare_data(cfg: &TrainConfig) -> Result<TrainData> {
    cfg.validate()?;
    let n = cfg.image_size;
    if let Some(dir) = &cfg.data_dir {
        let mut all = load_dataset(dir, Some(n))?;
        if all.len() < 2 {
            return Err(TrainError::Data("need at least two samples to split".into()));
        }
        shuffle(&mut all, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ SPLIT_SALT));
        let n_val = ((all.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, all.len() - 1);
        let train = all.split_off(n_val);
        return Ok(TrainData { train, val: all });
    }
    let generate = match cfg.dataset {
        DatasetKind::Toy => gen_toy_dataset,
        DatasetKind::Spectral => gen_spectral_dataset,
    };
    Ok(TrainData {
        train: generate(cfg.n_per_class, n, cfg.seed)?,
        val: generate(cfg.val_per_class, n, cfg.seed ^ VAL_SALT)?,
    })
}

/// Branch inputs of every sample, computed in parallel.
pub fn extract_features(samples: &[ForgerySample], config: &ModelConfig, active: [bool; 3]) -> Result<Vec<SampleFeatures>> {
    samples
        .par_iter()
        .map(|s| Ok(SampleFeatures::extract_active(&s.image, config, None, &HighOptions::default(), active)?))
        .collect()
}

fn targets(batch: &[&ForgerySample]) -> Result<Targets> {
    let (w, h) = (batch[0].mask.width(), batch[0].mask.height());
    let masks: Vec<f64> = batch.iter().flat_map(|s| s.mask.values().iter().copied()).collect();
    Ok(Targets {
        labels: batch.iter().map(|s| s.label).collect(),
        masks: Tensor::new(vec![batch.len(), h, w, 1], masks)?,
        types: batch.iter().map(|s| s.mtype).collect(),
    })
}

/// FGSM copies of a batch: the detection loss is differentiated with respect
/// to the pixels, the step is applied in `[0, 1]`, and the result is
/// quantized back to 8 bits before its features are extracted.
fn adversarial_features(
    model: &Model,
    batch: &[&ForgerySample],
    feats: &[&SampleFeatures],
    cfg: &TrainConfig,
    opts: &ForwardOptions,
) -> Result<Vec<SampleFeatures>> {
    let mut g = Graph::new();
    let mut p = Binder::new(model.store(), false);
    let images: Vec<Var> = batch.iter().map(|s| g.leaf(image_tensor(&s.image), true)).collect();
    let pass = model.forward(&mut g, &mut p, feats, Some(&images), opts)?;
    let fake = g.slice_cols(pass.heads.y_logits, 1, 1)?;
    let labels = Tensor::new(vec![batch.len()], batch.iter().map(|s| s.label as f64).collect())?;
    let l_cls = g.bce_logits_mean(fake, &labels)?;
    g.backward(l_cls)?;
    batch
        .iter()
        .zip(&images)
        .map(|(s, &v)| {
            let x = g.value(v);
            let grad = g.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape()));
            let adv = fgsm_perturb(x, &grad, cfg.fgsm_eps)?;
            let img = ImageRGB::from_unit(s.image.width(), s.image.height(), adv.data())?;
            Ok(SampleFeatures::extract_active(&img, &cfg.model, None, &HighOptions::default(), opts.active)?)
        })
        .collect()
}

fn check_finite(b: &LossBreakdown, epoch: usize, batch: usize) -> Result<()> {
    for (term, v) in [("classification", b.cls), ("localization", b.loc), ("type", b.typ), ("total", b.total)] {
        if !v.is_finite() {
            return Err(TrainError::NonFinite { term, epoch, batch });
        }
    }
    Ok(())
}

/// Trains a fresh model. Every source of randomness derives from `cfg.seed`.
pub fn train(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(TrainError::Data("training and validation sets must be nonempty".into()));
    }
    let opts = ForwardOptions {
        active: cfg.branches,
        cross_terms: true,
    };
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let train_feats = extract_features(&data.train, &cfg.model, opts.active)?;
    let val_feats = extract_features(&data.val, &cfg.model, opts.active)?;
    model.fit_norms(&train_feats.iter().collect::<Vec<_>>());

    let mut optimizer = AdamW::new(AdamHyper {
        weight_decay: cfg.weight_decay,
        ..AdamHyper::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.t_max, cfg.lr, cfg.lr_min);
        let weights = if epoch < cfg.warmup_epochs {
            LossWeights {
                loc: 0.0,
                typ: 0.0,
                ..cfg.loss_weights
            }
        } else {
            cfg.loss_weights
        };
        let adversarial = epoch >= cfg.epochs - cfg.adversarial_epochs;
        shuffle(&mut order, &mut rng);

        let mut sums = [0.0; 4];
        let mut scores = Vec::with_capacity(order.len());
        let mut labels = Vec::with_capacity(order.len());
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&ForgerySample> = idx.iter().map(|&i| &data.train[i]).collect();
            let feats: Vec<&SampleFeatures> = idx.iter().map(|&i| &train_feats[i]).collect();
            let t = targets(&batch)?;
            let adv = if adversarial {
                Some(adversarial_features(&model, &batch, &feats, cfg, &opts)?)
            } else {
                None
            };

            let mut g = Graph::new();
            let mut p = Binder::new(model.store(), true);
            let pass = model.forward(&mut g, &mut p, &feats, None, &opts)?;
            let clean = total_loss(&mut g, &pass.heads, &t, &weights)?;
            let y = g.value(pass.heads.y).data();
            scores.extend((0..batch.len()).map(|i| y[2 * i + 1]));
            labels.extend(batch.iter().map(|s| s.label));

            let mut b = clean.breakdown(&g);
            let loss = match &adv {
                Some(adv) => {
                    let refs: Vec<&SampleFeatures> = adv.iter().collect();
                    let adv_pass = model.forward(&mut g, &mut p, &refs, None, &opts)?;
                    let adv_loss = total_loss(&mut g, &adv_pass.heads, &t, &weights)?;
                    let a = adv_loss.breakdown(&g);
                    let [wc, wa] = cfg.adv_mix;
                    b = LossBreakdown {
                        cls: wc * b.cls + wa * a.cls,
                        loc: wc * b.loc + wa * a.loc,
                        typ: wc * b.typ + wa * a.typ,
                        total: wc * b.total + wa * a.total,
                    };
                    let lc = g.scale(clean.total, wc);
                    let la = g.scale(adv_loss.total, wa);
                    g.add(lc, la)?
                }
                None => clean.total,
            };
            check_finite(&b, epoch + 1, bi)?;
            g.backward(loss)?;
            let grads = p.grads(&g);
            drop(p);
            optimizer.step(model.store_mut(), &grads, lr)?;
            let n = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([b.cls, b.loc, b.typ, b.total]) {
                *s += v * n;
            }
        }

        let count = order.len() as f64;
        let acc_train = accuracy(&scores, &labels, 0.5)?;
        let (acc_val, iou_val) = validate(&model, data, &val_feats, &opts)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr,
            l_cls: sums[0] / count,
            l_loc: sums[1] / count,
            l_type: sums[2] / count,
            l_total: sums[3] / count,
            acc_train,
            acc_val,
            iou_val,
        };
        log::info!(
            "epoch {:>3} lr {:.3e} loss {:.4} (cls {:.4} loc {:.4} type {:.4}) acc {:.3} val {:.3} iou {:.3}",
            m.epoch,
            m.lr,
            m.l_total,
            m.l_cls,
            m.l_loc,
            m.l_type,
            m.acc_train,
            m.acc_val,
            m.iou_val
        );
        log.push(m);
    }
    Ok(TrainOutcome { model, log })
}

fn validate(model: &Model, data: &TrainData, feats: &[SampleFeatures], opts: &ForwardOptions) -> Result<(f64, f64)> {
    let refs: Vec<&SampleFeatures> = feats.iter().collect();
    let outs = model.predict(&refs, opts)?;
    let scores: Vec<f64> = outs.iter().map(|o| o.p_fake()).collect();
    let labels: Vec<u8> = data.val.iter().map(|s| s.label).collect();
    let acc = accuracy(&scores, &labels, 0.5)?;
    let mut ious = Vec::new();
    for (o, s) in outs.iter().zip(&data.val) {
        if s.label == 1 {
            ious.push(pixel_f1_iou(o.mask_hat.values(), s.mask.values(), 0.5)?.1);
        }
    }
    let iou = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
    Ok((acc, iou))
}

/// Writes the per-epoch log with the fixed header. Values use Rust's
/// shortest round-trip formatting, so identical runs give identical bytes.
pub fn write_metrics_csv(log: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in log {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            m.epoch, m.lr, m.l_cls, m.l_loc, m.l_type, m.l_total, m.acc_train, m.acc_val, m.iou_val
        )
        .expect("string write");
    }
    let path = path.as_ref();
    std::fs::write(path, s).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}
