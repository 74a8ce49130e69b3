//! Lossy stage of baseline JPEG (color transform, 8x8 DCT, quantization)
//! without entropy coding, which is lossless and irrelevant to pixel values.
//! Chroma is kept at full resolution (4:4:4).

use std::f64::consts::PI;
use std::sync::OnceLock;

use super::{ImageError, ImageRGB, Result};

/// Baseline luminance quantization table (ITU T.81 Annex K), row-major.
pub const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Baseline chrominance quantization table (ITU T.81 Annex K), row-major.
pub const CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Scales a base table with the IJG quality rule.
pub fn quality_table(base: &[u16; 64], quality: u8) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(ImageError::InvalidParameter(format!(
            "JPEG quality must be in [1, 100], got {quality}"
        )));
    }
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &t) in out.iter_mut().zip(base) {
        *o = ((t as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(out)
}

/// `step * round(c / step)`.
pub fn quantize_dequantize(coeff: f64, step: f64) -> f64 {
    step * (coeff / step).round()
}

fn basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = cu * (PI * u as f64 * (2 * x + 1) as f64 / 16.0).cos();
            }
        }
        b
    })
}

/// Orthonormal 2-D DCT-II of a row-major 8x8 block.
pub fn dct8x8_orthonormal(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

/// Inverse of [`dct8x8_orthonormal`].
pub fn idct8x8_orthonormal(coeffs: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u][x] * coeffs[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| b[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

/// Simulates baseline JPEG compression at `quality` and returns the decoded
/// pixels. Partial edge blocks are padded by edge replication.
pub fn jpeg_simulate(img: &ImageRGB, quality: u8) -> Result<ImageRGB> {
    let luma = quality_table(&LUMA_TABLE, quality)?;
    let chroma = quality_table(&CHROMA_TABLE, quality)?;
    let (w, h) = (img.width(), img.height());

    let mut planes = [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]];
    for (i, p) in img.pixels().chunks_exact(3).enumerate() {
        let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
        planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b;
        planes[1][i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0;
        planes[2][i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0;
    }

    for (ci, plane) in planes.iter_mut().enumerate() {
        let table = if ci == 0 { &luma } else { &chroma };
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        let sy = (by + y).min(h - 1);
                        let sx = (bx + x).min(w - 1);
                        block[y * 8 + x] = plane[sy * w + sx] - 128.0;
                    }
                }
                let mut coeffs = dct8x8_orthonormal(&block);
                for (c, &step) in coeffs.iter_mut().zip(table.iter()) {
                    *c = quantize_dequantize(*c, step);
                }
                let rec = idct8x8_orthonormal(&coeffs);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        plane[(by + y) * w + bx + x] = rec[y * 8 + x] + 128.0;
                    }
                }
            }
        }
    }

    let mut pixels = Vec::with_capacity(3 * w * h);
    for i in 0..w * h {
        let (yy, cb, cr) = (planes[0][i], planes[1][i] - 128.0, planes[2][i] - 128.0);
        let rgb = [
            yy + 1.402 * cr,
            yy - 0.344_136 * cb - 0.714_136 * cr,
            yy + 1.772 * cb,
        ];
        pixels.extend(rgb.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    }
    ImageRGB::new(w, h, pixels)
}
