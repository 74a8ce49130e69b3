//! Finite-difference verification of every backward rule plus one
//! end-to-end pass through the full model and its losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fusion::{total_loss, ForwardOptions, FusionError, LossWeights, Model, ModelConfig, SampleFeatures, Targets};
use crate::image::ImageRGB;
use crate::layers::param_grad_check_faulted;
use crate::tensor::{finite_diff_check_faulted, ConvPadding, Graph, Tensor, TensorError, Var, OP_NAMES};

/// Tolerance used when none is given.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Name of the end-to-end entry in the report.
pub const MODEL_CHECK: &str = "model";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst relative error over checked coordinates.
    pub worst: f64,
    pub passed: bool,
}

/// Every primitive with a backward rule, in tape order.
pub fn primitives() -> impl Iterator<Item = &'static str> {
    OP_NAMES.iter().copied().filter(|&n| n != "leaf" && n != "const")
}

type Loss = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("positive extents")
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

/// Values in `[0.2, 1]` with a random sign, kept clear of kinks at zero.
fn signed_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.2, 1.0);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Random-weighted sum of `out`, so every output coordinate contributes a
/// distinct gradient.
fn weighted(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var, TensorError> {
    let wv = g.constant(w.clone());
    g.dot(out, wv)
}

/// Inputs and scalar loss exercising primitive `name`.
fn case(name: &str, rng: &mut ChaCha8Rng) -> Option<(Vec<Tensor>, Loss)> {
    macro_rules! unary {
        ($input:expr, $out_shape:expr, |$g:ident, $x:ident| $body:expr) => {{
            let w = normal(rng, &$out_shape);
            let input = $input;
            let f: Loss = Box::new(move |$g: &mut Graph, v: &[Var]| {
                let $x = v[0];
                let y = $body;
                weighted($g, y, &w)
            });
            (vec![input], f)
        }};
    }
    macro_rules! binary {
        ($a:expr, $b:expr, $out_shape:expr, |$g:ident, $x:ident, $y:ident| $body:expr) => {{
            let w = normal(rng, &$out_shape);
            let (a, b) = ($a, $b);
            let f: Loss = Box::new(move |$g: &mut Graph, v: &[Var]| {
                let ($x, $y) = (v[0], v[1]);
                let out = $body;
                weighted($g, out, &w)
            });
            (vec![a, b], f)
        }};
    }
    let m = [3, 4];
    Some(match name {
        "matmul" => binary!(normal(rng, &[3, 5]), normal(rng, &[5, 2]), [3, 2], |g, a, b| g.matmul(a, b)?),
        "affine" => {
            let w = normal(rng, &[3, 2]);
            let inputs = vec![normal(rng, &[3, 5]), normal(rng, &[5, 2]), normal(rng, &[2])];
            let f: Loss = Box::new(move |g, v| {
                let y = g.affine(v[0], v[1], v[2])?;
                weighted(g, y, &w)
            });
            (inputs, f)
        }
        "add" => binary!(normal(rng, &m), normal(rng, &m), m, |g, a, b| g.add(a, b)?),
        "sub" => binary!(normal(rng, &m), normal(rng, &m), m, |g, a, b| g.sub(a, b)?),
        "mul" => binary!(normal(rng, &m), normal(rng, &m), m, |g, a, b| g.mul(a, b)?),
        "scale" => unary!(normal(rng, &m), m, |g, x| g.scale(x, -1.7)),
        "add_scalar" => unary!(normal(rng, &m), m, |g, x| g.add_scalar(x, 0.3)),
        "add_cols" => binary!(normal(rng, &[2, 3, 4]), normal(rng, &[4]), [2, 3, 4], |g, a, b| g.add_cols(a, b)?),
        "mul_cols" => binary!(normal(rng, &[2, 3, 4]), normal(rng, &[4]), [2, 3, 4], |g, a, b| g.mul_cols(a, b)?),
        "sum" => unary!(normal(rng, &m), [1], |g, x| g.sum(x)),
        "mean" => unary!(normal(rng, &m), [1], |g, x| g.mean(x)),
        "sigmoid" => unary!(uniform(rng, &m, -3.0, 3.0), m, |g, x| g.sigmoid(x)),
        "gelu" => unary!(uniform(rng, &m, -3.0, 3.0), m, |g, x| g.gelu(x)),
        "log" => unary!(uniform(rng, &m, 0.2, 3.0), m, |g, x| g.log(x)?),
        "exp" => unary!(uniform(rng, &m, -2.0, 2.0), m, |g, x| g.exp(x)),
        // Bounds sit between the sampled magnitudes so both regimes appear.
        "clamp" => unary!(signed_away_from_zero(rng, &m), m, |g, x| g.clamp(x, -0.6, 0.6)),
        "magnitude" => binary!(
            signed_away_from_zero(rng, &m),
            signed_away_from_zero(rng, &m),
            m,
            |g, a, b| g.magnitude(a, b)?
        ),
        "softmax_rows" => unary!(uniform(rng, &[3, 5], -2.0, 2.0), [3, 5], |g, x| g.softmax_rows(x)),
        "layer_norm" => unary!(normal(rng, &[3, 6]), [3, 6], |g, x| g.layer_norm(x)),
        "attention" => {
            let w = normal(rng, &[6, 4]);
            let inputs = vec![normal(rng, &[6, 4]), normal(rng, &[8, 4]), normal(rng, &[8, 4])];
            let f: Loss = Box::new(move |g, v| {
                let y = g.attention(v[0], v[1], v[2], 2, 2, 0.7)?;
                weighted(g, y, &w)
            });
            (inputs, f)
        }
        "conv2d" => binary!(
            normal(rng, &[6, 8, 3]),
            normal(rng, &[3, 3, 3, 2]),
            [3, 4, 2],
            |g, x, k| g.conv2d(x, k, 2, ConvPadding::Same)?
        ),
        "pad_edge" => unary!(normal(rng, &[3, 3, 1]), [7, 5, 1], |g, x| g.pad_edge(x, 2, 1)?),
        "resample" => unary!(normal(rng, &[2, 5, 4, 2]), [2, 3, 7, 2], |g, x| g.resample(x, 3, 7)?),
        "reshape" => unary!(normal(rng, &m), [2, 6], |g, x| g.reshape(x, &[2, 6])?),
        "concat_last" => binary!(normal(rng, &[2, 3]), normal(rng, &[2, 2]), [2, 5], |g, a, b| g.concat_last(&[a, b])?),
        "concat_rows" => binary!(normal(rng, &[2, 3]), normal(rng, &[1, 3]), [3, 3], |g, a, b| g.concat_rows(&[a, b])?),
        "slice_cols" => unary!(normal(rng, &[3, 5]), [3, 2], |g, x| g.slice_cols(x, 1, 2)?),
        "group_mean" => unary!(normal(rng, &[6, 3]), [2, 3], |g, x| g.group_mean(x, 2)?),
        "bce_mean" => {
            let t = uniform(rng, &[2, 5], 0.0, 1.0);
            (
                vec![uniform(rng, &[2, 5], 0.05, 0.95)],
                Box::new(move |g: &mut Graph, v: &[Var]| g.bce_mean(v[0], &t)) as Loss,
            )
        }
        "dice_loss" => {
            let t = Tensor::new(vec![2, 5], (0..10).map(|i| f64::from(u8::from(i % 3 == 0))).collect()).expect("ten values");
            (
                vec![uniform(rng, &[2, 5], 0.05, 0.95)],
                Box::new(move |g: &mut Graph, v: &[Var]| g.dice_loss(v[0], &t, 2, 1.0)) as Loss,
            )
        }
        "nll_mean" => (
            vec![uniform(rng, &[3, 4], 0.1, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.nll_mean(v[0], &[2, 0, 3])) as Loss,
        ),
        "bce_logits_mean" => {
            let t = uniform(rng, &[2, 5], 0.0, 1.0);
            (
                vec![uniform(rng, &[2, 5], -4.0, 4.0)],
                Box::new(move |g: &mut Graph, v: &[Var]| g.bce_logits_mean(v[0], &t)) as Loss,
            )
        }
        "cross_entropy_mean" => (
            vec![uniform(rng, &[3, 4], -3.0, 3.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.cross_entropy_mean(v[0], &[2, 0, 3])) as Loss,
        ),
        _ => return None,
    })
}

/// Checks one primitive. `None` for a name without a registered case.
pub fn check_primitive(name: &str, seed: u64, tolerance: f64, fault: Option<&str>) -> Option<Result<CheckResult, TensorError>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, f) = case(name, &mut rng)?;
    Some(finite_diff_check_faulted(|g, v| f(g, v), &inputs, STEP, None, fault).map(|worst| CheckResult {
        name: name.to_string(),
        worst,
        passed: worst < tolerance,
    }))
}

/// Configuration of the end-to-end check: an 8x8 token grid (64 tokens
/// per branch) over 32x32 inputs with a narrow encoder.
pub fn model_check_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        grid: 8,
        d_model: 8,
        heads: 2,
        layers: 1,
        ffn: 16,
        ..ModelConfig::default()
    }
}

fn noise_image(size: usize, rng: &mut ChaCha8Rng) -> ImageRGB {
    let pixels = (0..size * size * 3).map(|_| rng.random::<u8>()).collect();
    ImageRGB::new(size, size, pixels).expect("matching length")
}

/// Full model forward through fusion, all heads and the total loss on a
/// two-sample batch; checks a few coordinates of every trainable tensor.
pub fn check_model(seed: u64, tolerance: f64, fault: Option<&str>) -> Result<CheckResult, FusionError> {
    let config = model_check_config();
    let size = config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(config.clone(), seed)?;
    let feats: Vec<SampleFeatures> = (0..2)
        .map(|_| SampleFeatures::extract(&noise_image(size, &mut rng), &config, None, &Default::default()))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&SampleFeatures> = feats.iter().collect();
    model.fit_norms(&refs);
    let mut mask = vec![0.0; 2 * size * size];
    for y in 8..20 {
        for x in 4..16 {
            mask[size * size + y * size + x] = 1.0;
        }
    }
    let targets = Targets {
        labels: vec![0, 1],
        masks: Tensor::new(vec![2, size, size, 1], mask)?,
        types: vec![0, 2],
    };
    let opts = ForwardOptions::default();
    let loss = |g: &mut Graph, p: &mut crate::layers::Binder<'_>| -> Result<Var, FusionError> {
        let pass = model.forward(g, p, &refs, None, &opts)?;
        Ok(total_loss(g, &pass.heads, &targets, &LossWeights::default())?.total)
    };
    let (worst, _) = param_grad_check_faulted(model.store(), loss, 2, STEP, fault)?;
    Ok(CheckResult {
        name: MODEL_CHECK.to_string(),
        worst,
        passed: worst < tolerance,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("no gradient case registered for {0}")]
    Unregistered(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

/// Every primitive once, in tape order, then the end-to-end model.
pub fn run_suite(seed: u64, tolerance: f64, fault: Option<&str>) -> Result<Vec<CheckResult>, GradCheckError> {
    let mut out = Vec::new();
    for (i, name) in primitives().enumerate() {
        let r = check_primitive(name, seed.wrapping_add(i as u64), tolerance, fault).ok_or(GradCheckError::Unregistered(name))??;
        out.push(r);
    }
    out.push(check_model(seed, tolerance, fault)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_is_registered_once() {
        let names: Vec<&str> = primitives().collect();
        assert_eq!(names.len(), OP_NAMES.len() - 2);
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in names {
            assert!(case(n, &mut rng).is_some(), "{n}");
        }
        assert!(case("leaf", &mut rng).is_none());
    }

    #[test]
    fn seed_seven_passes_everywhere() {
        let report = run_suite(7, DEFAULT_TOLERANCE, None).unwrap();
        assert_eq!(report.len(), OP_NAMES.len() - 1);
        for r in &report {
            assert!(r.passed, "{}: {}", r.name, r.worst);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        for op in ["softmax_rows", "conv2d", "gelu", "nll_mean"] {
            let r = check_primitive(op, 1, DEFAULT_TOLERANCE, Some(op)).unwrap().unwrap();
            assert!(!r.passed, "{op} survived a corrupted backward rule");
            let clean = check_primitive("exp", 1, DEFAULT_TOLERANCE, Some(op)).unwrap().unwrap();
            assert!(clean.passed || op == "mul");
        }
    }
}
