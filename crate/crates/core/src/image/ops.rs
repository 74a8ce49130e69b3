use crate::tensor::resample_weights;

use super::{unit_to_u8, ImageError, ImagePlane, ImageRGB, Result, MIN_IMAGE_SIDE};

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// `y = 0.299 R + 0.587 G + 0.114 B`, scaled to `[0, 1]`.
pub fn to_gray(img: &ImageRGB) -> ImagePlane {
    let values = img
        .pixels()
        .chunks_exact(3)
        .map(|p| {
            let y = (LUMA[0] * p[0] as f64 + LUMA[1] * p[1] as f64 + LUMA[2] * p[2] as f64) / 255.0;
            y.clamp(0.0, 1.0)
        })
        .collect();
    ImagePlane::new(img.width(), img.height(), values).expect("luma stays in range")
}

/// Separable resampling of an interleaved `[h, w, c]` buffer.
pub(crate) fn resample_interleaved(
    src: &[f64],
    w: usize,
    h: usize,
    c: usize,
    nw: usize,
    nh: usize,
) -> Vec<f64> {
    let cols = resample_weights(w, nw);
    let rows = resample_weights(h, nh);
    let mut tmp = vec![0.0; h * nw * c];
    for y in 0..h {
        for (ox, taps) in cols.iter().enumerate() {
            for ch in 0..c {
                tmp[(y * nw + ox) * c + ch] = taps.iter().map(|&(ix, wt)| wt * src[(y * w + ix) * c + ch]).sum();
            }
        }
    }
    let mut out = vec![0.0; nh * nw * c];
    for (oy, taps) in rows.iter().enumerate() {
        for i in 0..nw * c {
            out[oy * nw * c + i] = taps.iter().map(|&(iy, wt)| wt * tmp[iy * nw * c + i]).sum();
        }
    }
    out
}

/// Bilinear resize of an RGB image (half-pixel centres; widened triangle
/// filter when shrinking). Identity sizes return an exact copy.
pub fn resize_bilinear(img: &ImageRGB, new_w: usize, new_h: usize) -> Result<ImageRGB> {
    if new_w < MIN_IMAGE_SIDE || new_h < MIN_IMAGE_SIDE {
        return Err(ImageError::TooSmall {
            width: new_w,
            height: new_h,
        });
    }
    if new_w == img.width() && new_h == img.height() {
        return Ok(img.clone());
    }
    let src: Vec<f64> = img.pixels().iter().map(|&p| p as f64).collect();
    let out = resample_interleaved(&src, img.width(), img.height(), 3, new_w, new_h);
    let pixels = out.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    ImageRGB::new(new_w, new_h, pixels)
}

/// Plane counterpart of [`resize_bilinear`]; any target of at least 1x1.
pub fn resize_plane(plane: &ImagePlane, new_w: usize, new_h: usize) -> Result<ImagePlane> {
    if new_w == 0 || new_h == 0 {
        return Err(ImageError::TooSmall {
            width: new_w,
            height: new_h,
        });
    }
    let out = resample_interleaved(plane.values(), plane.width(), plane.height(), 1, new_w, new_h);
    ImagePlane::new(new_w, new_h, out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Normalized sampled Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(ImageError::InvalidParameter(format!(
            "blur sigma must be positive, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Clamp-to-edge separable convolution of interleaved `[h, w, c]` data.
///
/// Each output is accumulated relative to the centre sample, which leaves
/// flat regions bit-identical.
pub(crate) fn blur_interleaved(src: &[f64], w: usize, h: usize, c: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let centre = src[(y * w + x) * c + ch];
                let mut acc = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    let sx = clampi(x as isize + i as isize - r, w);
                    acc += k * (src[(y * w + sx) * c + ch] - centre);
                }
                tmp[(y * w + x) * c + ch] = centre + acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let centre = tmp[(y * w + x) * c + ch];
                let mut acc = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    let sy = clampi(y as isize + i as isize - r, h);
                    acc += k * (tmp[(sy * w + x) * c + ch] - centre);
                }
                out[(y * w + x) * c + ch] = centre + acc;
            }
        }
    }
    out
}

pub fn gaussian_blur_plane(plane: &ImagePlane, sigma: f64) -> Result<ImagePlane> {
    let k = gaussian_kernel(sigma)?;
    let out = blur_interleaved(plane.values(), plane.width(), plane.height(), 1, &k);
    ImagePlane::new(
        plane.width(),
        plane.height(),
        out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
}

pub fn gaussian_blur(img: &ImageRGB, sigma: f64) -> Result<ImageRGB> {
    let k = gaussian_kernel(sigma)?;
    let out = blur_interleaved(&img.to_unit(), img.width(), img.height(), 3, &k);
    ImageRGB::new(
        img.width(),
        img.height(),
        out.iter().map(|&v| unit_to_u8(v)).collect(),
    )
}
