use super::gemm::{self, View, ViewMut};
use super::graph::{shape_err, Graph, Op, Var};
use super::{Result, Tensor, TensorError};

/// Border handling for [`Graph::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPadding {
    /// Zero fill so that stride-1 output matches the input extent (odd kernels only).
    Same,
    Valid,
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    pt: usize,
    pl: usize,
}

fn conv_geom(xs: &[usize], ks: &[usize], stride: usize, padding: ConvPadding) -> Result<ConvGeom> {
    if xs.len() != 3 || ks.len() != 4 || ks[2] != xs[2] || stride == 0 {
        return Err(shape_err("conv2d", xs, ks));
    }
    let (h, w, cin) = (xs[0], xs[1], xs[2]);
    let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
    let (pt, pl) = match padding {
        ConvPadding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(TensorError::Contract(format!(
                    "conv2d: same padding needs odd kernel extents, got {kh}x{kw}"
                )));
            }
            ((kh - 1) / 2, (kw - 1) / 2)
        }
        ConvPadding::Valid => {
            if kh > h || kw > w {
                return Err(shape_err("conv2d", xs, ks));
            }
            (0, 0)
        }
    };
    let ho = (h + 2 * pt - kh) / stride + 1;
    let wo = (w + 2 * pl - kw) / stride + 1;
    Ok(ConvGeom {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        ho,
        wo,
        pt,
        pl,
    })
}

fn im2col(x: &[f64], g: &ConvGeom, stride: usize) -> Vec<f64> {
    let kdim = g.kh * g.kw * g.cin;
    let mut cols = vec![0.0; g.ho * g.wo * kdim];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * kdim..(oy * g.wo + ox + 1) * kdim];
            for dy in 0..g.kh {
                let iy = (oy * stride + dy) as isize - g.pt as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for dx in 0..g.kw {
                    let ix = (ox * stride + dx) as isize - g.pl as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (dy * g.kw + dx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], g: &ConvGeom, stride: usize) -> Vec<f64> {
    let kdim = g.kh * g.kw * g.cin;
    let mut dx = vec![0.0; g.h * g.w * g.cin];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &dcols[(oy * g.wo + ox) * kdim..(oy * g.wo + ox + 1) * kdim];
            for dy in 0..g.kh {
                let iy = (oy * stride + dy) as isize - g.pt as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for dxk in 0..g.kw {
                    let ix = (ox * stride + dxk) as isize - g.pl as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (dy * g.kw + dxk) * g.cin;
                    for c in 0..g.cin {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    cols: &[f64],
    g: &[f64],
    stride: usize,
    padding: ConvPadding,
    need_x: bool,
    need_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let geom = conv_geom(x.shape(), k.shape(), stride, padding).expect("validated in forward");
    let kdim = geom.kh * geom.kw * geom.cin;
    let p = geom.ho * geom.wo;
    let dk = need_k.then(|| {
        let mut dk = vec![0.0; kdim * geom.cout];
        gemm::gemm(
            kdim,
            p,
            geom.cout,
            1.0,
            View::transposed(cols, kdim),
            View::row_major(g, geom.cout),
            0.0,
            ViewMut::row_major(&mut dk, geom.cout),
        );
        dk
    });
    let dx = need_x.then(|| {
        let mut dcols = vec![0.0; p * kdim];
        gemm::gemm(
            p,
            geom.cout,
            kdim,
            1.0,
            View::row_major(g, geom.cout),
            View::transposed(k.data(), geom.cout),
            0.0,
            ViewMut::row_major(&mut dcols, kdim),
        );
        col2im(&dcols, &geom, stride)
    });
    (dx, dk)
}

pub(crate) fn pad_edge_backward(xs: &[usize], g: &[f64], py: usize, px: usize) -> Vec<f64> {
    let (h, w, c) = (xs[0], xs[1], xs[2]);
    let (hp, wp) = (h + 2 * py, w + 2 * px);
    let mut dx = vec![0.0; h * w * c];
    for y in 0..hp {
        let sy = y.saturating_sub(py).min(h - 1);
        for x in 0..wp {
            let sx = x.saturating_sub(px).min(w - 1);
            for ch in 0..c {
                dx[(sy * w + sx) * c + ch] += g[(y * wp + x) * c + ch];
            }
        }
    }
    dx
}

/// Separable linear resampling weights from `n_in` samples to `n_out`.
///
/// Sample `j` covers `[j, j + 1)`; output `i` is centred at
/// `(i + 0.5) * n_in / n_out`. Upsampling reduces to bilinear interpolation
/// with half-pixel centres (align-corners off) and clamped borders;
/// downsampling widens the triangle to the scale factor so every input
/// sample contributes.
pub fn resample_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let support = scale.max(1.0);
    (0..n_out)
        .map(|i| {
            let centre = (i as f64 + 0.5) * scale;
            let lo = (centre - support).floor().max(0.0) as usize;
            let hi = ((centre + support).ceil() as usize).min(n_in);
            let mut taps: Vec<(usize, f64)> = (lo..hi)
                .filter_map(|j| {
                    let w = 1.0 - ((j as f64 + 0.5 - centre) / support).abs();
                    (w > 0.0).then_some((j, w))
                })
                .collect();
            if taps.is_empty() {
                // centre beyond the last sample; nearest neighbour
                taps.push((((centre - 0.5).round().max(0.0) as usize).min(n_in - 1), 1.0));
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

pub(crate) struct ResamplePlan {
    rows: Vec<Vec<(usize, f64)>>,
    cols: Vec<Vec<(usize, f64)>>,
}

impl ResamplePlan {
    fn new(h: usize, w: usize, ho: usize, wo: usize) -> Self {
        Self {
            rows: resample_weights(h, ho),
            cols: resample_weights(w, wo),
        }
    }

    fn forward(&self, xs: &[usize], x: &[f64]) -> Vec<f64> {
        let n = xs.len();
        let (h, w, c) = (xs[n - 3], xs[n - 2], xs[n - 1]);
        let lead: usize = xs[..n - 3].iter().product();
        let (ho, wo) = (self.rows.len(), self.cols.len());
        let mut tmp = vec![0.0; lead * h * wo * c];
        for b in 0..lead {
            for y in 0..h {
                let src = &x[(b * h + y) * w * c..(b * h + y + 1) * w * c];
                let dst = &mut tmp[(b * h + y) * wo * c..(b * h + y + 1) * wo * c];
                for (ox, taps) in self.cols.iter().enumerate() {
                    for &(ix, wt) in taps {
                        for ch in 0..c {
                            dst[ox * c + ch] += wt * src[ix * c + ch];
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; lead * ho * wo * c];
        let row = wo * c;
        for b in 0..lead {
            for (oy, taps) in self.rows.iter().enumerate() {
                let dst = &mut out[(b * ho + oy) * row..(b * ho + oy + 1) * row];
                for &(iy, wt) in taps {
                    let src = &tmp[(b * h + iy) * row..(b * h + iy + 1) * row];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wt * s;
                    }
                }
            }
        }
        out
    }

    pub(crate) fn backward(&self, xs: &[usize], g: &[f64]) -> Vec<f64> {
        let n = xs.len();
        let (h, w, c) = (xs[n - 3], xs[n - 2], xs[n - 1]);
        let lead: usize = xs[..n - 3].iter().product();
        let (ho, wo) = (self.rows.len(), self.cols.len());
        let row = wo * c;
        let mut tmp = vec![0.0; lead * h * row];
        for b in 0..lead {
            for (oy, taps) in self.rows.iter().enumerate() {
                let src = &g[(b * ho + oy) * row..(b * ho + oy + 1) * row];
                for &(iy, wt) in taps {
                    let dst = &mut tmp[(b * h + iy) * row..(b * h + iy + 1) * row];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wt * s;
                    }
                }
            }
        }
        let mut dx = vec![0.0; lead * h * w * c];
        for b in 0..lead {
            for y in 0..h {
                let src = &tmp[(b * h + y) * row..(b * h + y + 1) * row];
                let dst = &mut dx[(b * h + y) * w * c..(b * h + y + 1) * w * c];
                for (ox, taps) in self.cols.iter().enumerate() {
                    for &(ix, wt) in taps {
                        for ch in 0..c {
                            dst[ix * c + ch] += wt * src[ox * c + ch];
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Graph {
    /// 2-D cross-correlation (no kernel flip) of `x: [H, W, Cin]` with
    /// `k: [kh, kw, Cin, Cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: ConvPadding) -> Result<Var> {
        let geom = conv_geom(self.shape(x), self.shape(k), stride, padding)?;
        let cols = im2col(self.value(x).data(), &geom, stride);
        let kdim = geom.kh * geom.kw * geom.cin;
        let out = gemm::matmul(&cols, self.value(k).data(), geom.ho * geom.wo, kdim, geom.cout);
        let out = Tensor::from_parts(vec![geom.ho, geom.wo, geom.cout], out);
        let cols = if self.requires_grad(k) { cols } else { Vec::new() };
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
                cols,
            },
            &[x, k],
        ))
    }

    /// Replicates border pixels of `[H, W, C]` outward by `py` rows and `px` columns.
    pub fn pad_edge(&mut self, x: Var, py: usize, px: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(shape_err("pad_edge", s, &[0, 0, 0]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (hp, wp) = (h + 2 * py, w + 2 * px);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(hp * wp * c);
        for y in 0..hp {
            let sy = y.saturating_sub(py).min(h - 1);
            for xx in 0..wp {
                let sx = xx.saturating_sub(px).min(w - 1);
                data.extend_from_slice(&xd[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![hp, wp, c], data),
            Op::PadEdge { x, py, px },
            &[x],
        ))
    }

    /// Resamples the two spatial axes of `[..., H, W, C]` to `ho x wo`
    /// (see [`resample_weights`]).
    pub fn resample(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 || ho == 0 || wo == 0 {
            return Err(shape_err("resample", &s, &[ho, wo]));
        }
        let n = s.len();
        let plan = ResamplePlan::new(s[n - 3], s[n - 2], ho, wo);
        let data = plan.forward(&s, self.value(x).data());
        let mut shape = s.clone();
        shape[n - 3] = ho;
        shape[n - 2] = wo;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Resample { x, plan }, &[x]))
    }
}
