//! Frequency and noise residual features: unnormalized block DCT, one-level
//! Haar detail subbands, and SRM residuals.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand_chacha::ChaCha8Rng;

use super::{embed_stream, gray_var, project_grid, srm_bank, BranchError, Field, Result};
use crate::image::{to_gray, ImagePlane, ImageRGB};
use crate::layers::{Binder, Conv, Linear, ParamStore, Standardize};
use crate::tensor::{ConvPadding, Graph, Tensor, Var};

/// Channel widths of the learned convolutions over DCT, DWT and SRM inputs.
pub const LOW_CONV_WIDTHS: [usize; 3] = [64, 16, 32];

fn cos_table() -> &'static [[f64; 8]; 8] {
    static T: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    T.get_or_init(|| {
        let mut t = [[0.0; 8]; 8];
        for (u, row) in t.iter_mut().enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                *v = (PI * u as f64 * (2 * x + 1) as f64 / 16.0).cos();
            }
        }
        t
    })
}

/// `D[u][v] = sum_x sum_y I[x][y] cos(pi u (2x+1)/16) cos(pi v (2y+1)/16)`
/// over a row-major block (`x` is the row), without normalization.
pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let c = cos_table();
    let mut tmp = [0.0; 64];
    for x in 0..8 {
        for v in 0..8 {
            tmp[x * 8 + v] = (0..8).map(|y| block[x * 8 + y] * c[v][y]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|x| c[u][x] * tmp[x * 8 + v]).sum();
        }
    }
    out
}

/// Inverse of [`dct8x8`] (DCT-III with weights 1/8 for the DC index, 1/4 otherwise).
pub fn idct8x8(coeffs: &[f64; 64]) -> [f64; 64] {
    let c = cos_table();
    let w = |u: usize| if u == 0 { 0.125 } else { 0.25 };
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for y in 0..8 {
            tmp[u * 8 + y] = (0..8).map(|v| w(v) * coeffs[u * 8 + v] * c[v][y]).sum();
        }
    }
    let mut out = [0.0; 64];
    for x in 0..8 {
        for y in 0..8 {
            out[x * 8 + y] = (0..8).map(|u| w(u) * c[u][x] * tmp[u * 8 + y]).sum();
        }
    }
    out
}

/// Coefficients of every non-overlapping 8x8 block.
#[derive(Clone, Debug, PartialEq)]
pub struct DctBlockGrid {
    blocks_x: usize,
    blocks_y: usize,
    coeffs: Vec<[f64; 64]>,
}

impl DctBlockGrid {
    pub fn blocks_x(&self) -> usize {
        self.blocks_x
    }

    pub fn blocks_y(&self) -> usize {
        self.blocks_y
    }

    pub fn block(&self, bx: usize, by: usize) -> &[f64; 64] {
        &self.coeffs[by * self.blocks_x + bx]
    }

    /// `[H/8, W/8, 64]`, channel `8u + v`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.coeffs.iter().flat_map(|c| c.iter().copied()).collect();
        Tensor::new(vec![self.blocks_y, self.blocks_x, 64], data).expect("non-empty grid")
    }

    /// Reassembles the plane from the coefficients.
    pub fn reconstruct(&self) -> Field {
        let (w, h) = (self.blocks_x * 8, self.blocks_y * 8);
        let mut values = vec![0.0; w * h];
        for by in 0..self.blocks_y {
            for bx in 0..self.blocks_x {
                let rec = idct8x8(self.block(bx, by));
                for x in 0..8 {
                    for y in 0..8 {
                        values[(by * 8 + x) * w + bx * 8 + y] = rec[x * 8 + y];
                    }
                }
            }
        }
        Field::new(w, h, values).expect("sized by construction")
    }
}

pub fn block_dct(gray: &ImagePlane) -> Result<DctBlockGrid> {
    let (w, h) = (gray.width(), gray.height());
    if w % 8 != 0 || h % 8 != 0 {
        return Err(BranchError::Dimensions(format!(
            "block DCT needs sides divisible by 8, got {w}x{h}"
        )));
    }
    let (bw, bh) = (w / 8, h / 8);
    let mut coeffs = Vec::with_capacity(bw * bh);
    for by in 0..bh {
        for bx in 0..bw {
            let mut block = [0.0; 64];
            for x in 0..8 {
                for y in 0..8 {
                    block[x * 8 + y] = gray.get(bx * 8 + y, by * 8 + x);
                }
            }
            coeffs.push(dct8x8(&block));
        }
    }
    Ok(DctBlockGrid {
        blocks_x: bw,
        blocks_y: bh,
        coeffs,
    })
}

/// One-level Haar decomposition with 1/2 normalization per 2x2 cell.
#[derive(Clone, Debug, PartialEq)]
pub struct HaarSubbands {
    pub ll: Field,
    pub lh: Field,
    pub hl: Field,
    pub hh: Field,
}

impl HaarSubbands {
    pub fn reconstruct(&self) -> Field {
        let (hw, hh) = (self.ll.width(), self.ll.height());
        let w = 2 * hw;
        let mut values = vec![0.0; w * 2 * hh];
        for y in 0..hh {
            for x in 0..hw {
                let (s, l, hi, d) = (self.ll.get(x, y), self.lh.get(x, y), self.hl.get(x, y), self.hh.get(x, y));
                values[2 * y * w + 2 * x] = (s + l + hi + d) / 2.0;
                values[2 * y * w + 2 * x + 1] = (s - l + hi - d) / 2.0;
                values[(2 * y + 1) * w + 2 * x] = (s + l - hi - d) / 2.0;
                values[(2 * y + 1) * w + 2 * x + 1] = (s - l - hi + d) / 2.0;
            }
        }
        Field::new(w, 2 * hh, values).expect("sized by construction")
    }

    /// Detail subbands stacked as `[H/2, W/2, 3]` in `(LH, HL, HH)` order.
    pub fn detail_tensor(&self) -> Tensor {
        super::stack_fields(&[&self.lh, &self.hl, &self.hh]).expect("equal subband sizes")
    }
}

/// Cell taps `[a, b, c, d]` for `[[a, b], [c, d]]`, in `(LH, HL, HH)` order.
const HAAR_DETAIL: [[f64; 4]; 3] = [
    [0.5, -0.5, 0.5, -0.5],
    [0.5, 0.5, -0.5, -0.5],
    [0.5, -0.5, -0.5, 0.5],
];

pub fn haar_dwt(gray: &ImagePlane) -> Result<HaarSubbands> {
    let (w, h) = (gray.width(), gray.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(BranchError::Dimensions(format!(
            "Haar transform needs even sides, got {w}x{h}"
        )));
    }
    let (hw, hh) = (w / 2, h / 2);
    let mut bands: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(hw * hh));
    for y in 0..hh {
        for x in 0..hw {
            let a = gray.get(2 * x, 2 * y);
            let b = gray.get(2 * x + 1, 2 * y);
            let c = gray.get(2 * x, 2 * y + 1);
            let d = gray.get(2 * x + 1, 2 * y + 1);
            bands[0].push((a + b + c + d) / 2.0);
            for (band, t) in bands[1..].iter_mut().zip(&HAAR_DETAIL) {
                band.push(t[0] * a + t[1] * b + t[2] * c + t[3] * d);
            }
        }
    }
    let [ll, lh, hl, hhb] = bands.map(|v| Field::new(hw, hh, v).expect("sized by construction"));
    Ok(HaarSubbands { ll, lh, hl, hh: hhb })
}

/// Residuals of the grayscale plane under every SRM kernel, `[H, W, 30]`,
/// with clamp-to-edge borders. Each tap is applied to the difference from
/// the centre pixel, so flat regions give exactly zero.
pub fn srm_residuals(img: &ImageRGB) -> Tensor {
    let gray = to_gray(img);
    let (w, h) = (gray.width(), gray.height());
    let bank = srm_bank();
    let taps: Vec<Vec<(isize, isize, f64)>> = bank
        .iter()
        .map(|k| {
            (0..25)
                .filter(|&i| k.taps[i] != 0)
                .map(|i| ((i / 5) as isize - 2, (i % 5) as isize - 2, k.taps[i] as f64))
                .collect()
        })
        .collect();
    let src = gray.values();
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, w as isize - 1) as usize;
        let cy = y.clamp(0, h as isize - 1) as usize;
        src[cy * w + cx]
    };
    let mut out = Vec::with_capacity(w * h * bank.len());
    for y in 0..h as isize {
        for x in 0..w as isize {
            let centre = at(x, y);
            for (k, t) in bank.iter().zip(&taps) {
                let acc: f64 = t.iter().map(|&(dy, dx, c)| c * (at(x + dx, y + dy) - centre)).sum();
                out.push(acc / k.divisor);
            }
        }
    }
    Tensor::new(vec![h, w, bank.len()], out).expect("non-empty image")
}

/// Raw low-level inputs: DCT `[H/8, W/8, 64]`, Haar details `[H/2, W/2, 3]`,
/// SRM residuals `[H, W, 30]`.
#[derive(Clone, Debug)]
pub struct LowFeatures {
    pub dct: Tensor,
    pub dwt: Tensor,
    pub srm: Tensor,
}

impl LowFeatures {
    pub fn extract(img: &ImageRGB) -> Result<Self> {
        let gray = to_gray(img);
        Ok(Self {
            dct: block_dct(&gray)?.to_tensor(),
            dwt: haar_dwt(&gray)?.detail_tensor(),
            srm: srm_residuals(img),
        })
    }

    pub fn bind(&self, g: &mut Graph) -> [Var; 3] {
        [
            g.constant(self.dct.clone()),
            g.constant(self.dwt.clone()),
            g.constant(self.srm.clone()),
        ]
    }
}

/// The same features as [`LowFeatures::extract`], computed as strided
/// convolutions on the graph so gradients reach the `[H, W, 3]` image.
pub fn low_features_graph(g: &mut Graph, rgb: Var) -> Result<[Var; 3]> {
    let s = g.shape(rgb).to_vec();
    if s.len() != 3 || s[0] % 8 != 0 || s[1] % 8 != 0 {
        return Err(BranchError::Dimensions(format!(
            "low branch needs [H, W, 3] with sides divisible by 8, got {s:?}"
        )));
    }
    let gray = gray_var(g, rgb)?;

    let c = cos_table();
    let mut dk = vec![0.0; 64 * 64];
    for x in 0..8 {
        for y in 0..8 {
            for u in 0..8 {
                for v in 0..8 {
                    dk[(x * 8 + y) * 64 + u * 8 + v] = c[u][x] * c[v][y];
                }
            }
        }
    }
    let dk = g.constant(Tensor::new(vec![8, 8, 1, 64], dk)?);
    let dct = g.conv2d(gray, dk, 8, ConvPadding::Valid)?;

    let mut hk = vec![0.0; 4 * 3];
    for (band, t) in HAAR_DETAIL.iter().enumerate() {
        for (i, &v) in t.iter().enumerate() {
            hk[i * 3 + band] = v;
        }
    }
    let hk = g.constant(Tensor::new(vec![2, 2, 1, 3], hk)?);
    let dwt = g.conv2d(gray, hk, 2, ConvPadding::Valid)?;

    let bank = srm_bank();
    let mut sk = vec![0.0; 25 * bank.len()];
    for (ki, k) in bank.iter().enumerate() {
        for (i, w) in k.weights().iter().enumerate() {
            sk[i * bank.len() + ki] = *w;
        }
    }
    let sk = g.constant(Tensor::new(vec![5, 5, 1, bank.len()], sk)?);
    let padded = g.pad_edge(gray, 2, 2)?;
    let srm = g.conv2d(padded, sk, 1, ConvPadding::Valid)?;
    Ok([dct, dwt, srm])
}

/// Learned part of the low branch.
#[derive(Clone, Debug)]
pub struct LowBranch {
    pub norms: [Standardize; 3],
    pub convs: [Conv; 3],
    pub proj: Linear,
}

impl LowBranch {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d_model: usize) -> Self {
        let cin = [64, 3, 30];
        let names = ["dct", "dwt", "srm"];
        let norms = std::array::from_fn(|i| Standardize::new(store, &format!("low.{}.norm", names[i]), cin[i]));
        let convs = std::array::from_fn(|i| {
            Conv::new(store, rng, &format!("low.{}.conv", names[i]), 3, cin[i], LOW_CONV_WIDTHS[i])
        });
        let proj = Linear::new(store, rng, "low.proj", LOW_CONV_WIDTHS.iter().sum(), d_model);
        Self { norms, convs, proj }
    }

    /// Tokens `[G^2, d]` from `[dct, dwt, srm]` feature variables.
    pub fn forward(&self, g: &mut Graph, p: &mut Binder<'_>, feats: [Var; 3], grid: usize) -> Result<Var> {
        let mut streams = Vec::with_capacity(3);
        for ((norm, conv), x) in self.norms.iter().zip(&self.convs).zip(feats) {
            streams.push(embed_stream(g, p, norm, conv, x, grid)?);
        }
        project_grid(g, p, &self.proj, &streams, grid)
    }

    /// Fits the input standardization from training features.
    pub fn fit_norms(&self, store: &mut ParamStore, feats: &[&LowFeatures]) {
        self.norms[0].fit(store, feats.iter().map(|f| &f.dct));
        self.norms[1].fit(store, feats.iter().map(|f| &f.dwt));
        self.norms[2].fit(store, feats.iter().map(|f| &f.srm));
    }
}
