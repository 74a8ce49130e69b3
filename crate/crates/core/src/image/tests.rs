use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rgb(w: usize, h: usize, seed: u64) -> ImageRGB {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageRGB::new(w, h, (0..3 * w * h).map(|_| rng.random()).collect()).unwrap()
}

/// Smooth color field with fine noise; stands in for a natural photograph.
fn texture(w: usize, h: usize, seed: u64) -> ImageRGB {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let base = 110.0 + 50.0 * (fx * 0.21).sin() * (fy * 0.13).cos() + 30.0 * ((fx + fy) * 0.05).sin();
            for c in 0..3 {
                let v = base + 15.0 * c as f64 + rng.random_range(-6.0..6.0);
                px.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageRGB::new(w, h, px).unwrap()
}

#[test]
fn png_and_pnm_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = random_rgb(16, 16, 1);
    for name in ["a.png", "a.ppm"] {
        let p = dir.path().join(name);
        save_image(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }
}

#[test]
fn small_images_are_rejected() {
    assert!(matches!(ImageRGB::filled(4, 4, [0, 0, 0]), Err(ImageError::TooSmall { .. })));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("tiny.pgm");
    std::fs::write(&p, b"P5\n4 4\n255\n0123456789abcdef").unwrap();
    assert!(matches!(load_image(&p), Err(ImageError::TooSmall { .. })));
}

#[test]
fn truncated_and_unknown_files_fail() {
    let dir = tempfile::tempdir().unwrap();
    let img = random_rgb(16, 16, 2);
    let p = dir.path().join("t.png");
    save_image(&img, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_image(&p), Err(ImageError::Decode { .. })));

    let q = dir.path().join("x.bin");
    std::fs::write(&q, b"not an image at all").unwrap();
    assert!(matches!(load_image(&q), Err(ImageError::UnsupportedFormat(_))));
    assert!(matches!(load_image(dir.path().join("missing.png")), Err(ImageError::Io { .. })));
}

#[test]
fn pgm_of_all_ones_plane_is_all_255() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.pgm");
    save_plane(&ImagePlane::filled(9, 10, 1.0).unwrap(), &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert!(bytes.starts_with(b"P5"));
    let payload = &bytes[bytes.len() - 90..];
    assert!(payload.iter().all(|&b| b == 255));
}

#[test]
fn gray_conversion_examples() {
    let white = ImageRGB::filled(8, 8, [255, 255, 255]).unwrap();
    assert_eq!(to_gray(&white).get(3, 3), 1.0);
    let black = ImageRGB::filled(8, 8, [0, 0, 0]).unwrap();
    assert_eq!(to_gray(&black).get(3, 3), 0.0);
    let red = ImageRGB::filled(8, 8, [255, 0, 0]).unwrap();
    assert!((to_gray(&red).get(0, 0) - 0.299).abs() < 1e-12);
}

#[test]
fn resize_examples() {
    let p = ImagePlane::filled(13, 9, 0.5).unwrap();
    let r = resize_plane(&p, 31, 17).unwrap();
    assert!(r.values().iter().all(|&v| (v - 0.5).abs() < 1e-15));

    let img = random_rgb(12, 10, 3);
    assert_eq!(resize_bilinear(&img, 12, 10).unwrap(), img);
    assert!(resize_bilinear(&img, 4, 10).is_err());

    // 2x upsample of the ramp [[0, 1/3], [2/3, 1]]
    let ramp = ImagePlane::new(2, 2, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
    let up = resize_plane(&ramp, 4, 4).unwrap();
    let src = |i: usize| ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
    for y in 0..4 {
        for x in 0..4 {
            let expected = (2.0 * src(y) + src(x)) / 3.0;
            assert!((up.get(x, y) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn gaussian_kernel_and_blur() {
    for sigma in [0.5, 1.0, 2.0, 3.7] {
        let k = gaussian_kernel(sigma).unwrap();
        assert_eq!(k.len(), 2 * (3.0 * sigma as f64).ceil() as usize + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(gaussian_kernel(0.0).is_err());
    assert!(gaussian_kernel(-1.0).is_err());

    let flat = ImageRGB::filled(20, 16, [37, 200, 91]).unwrap();
    assert_eq!(gaussian_blur(&flat, 1.3).unwrap(), flat);
    let flat_plane = ImagePlane::filled(20, 16, 0.123_456_789).unwrap();
    assert_eq!(gaussian_blur_plane(&flat_plane, 2.0).unwrap(), flat_plane);
}

#[test]
fn blurred_impulse_is_sampled_gaussian() {
    let sigma = 1.5;
    let n = 21;
    let mut v = vec![0.0; n * n];
    v[10 * n + 10] = 1.0;
    let plane = ImagePlane::new(n, n, v).unwrap();
    let out = gaussian_blur_plane(&plane, sigma).unwrap();
    let r = (3.0 * sigma).ceil() as i32;
    let norm: f64 = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).sum();
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as i32 - 10, y as i32 - 10);
            let expected = if dx.abs() <= r && dy.abs() <= r {
                (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp() / (norm * norm)
            } else {
                0.0
            };
            assert!((out.get(x, y) - expected).abs() < 1e-6);
        }
    }
}

#[test]
fn jpeg_quality_100_is_near_lossless() {
    let gray = ImageRGB::filled(16, 16, [128, 128, 128]).unwrap();
    let out = jpeg_simulate(&gray, 100).unwrap();
    let worst = gray
        .pixels()
        .iter()
        .zip(out.pixels())
        .map(|(a, b)| (*a as i32 - *b as i32).abs())
        .max()
        .unwrap();
    assert!(worst <= 1);
    assert!(quality_table(&LUMA_TABLE, 100).unwrap().iter().all(|&s| s == 1.0));
    assert!(jpeg_simulate(&gray, 0).is_err());
    assert!(jpeg_simulate(&gray, 101).is_err());
}

fn mse(a: &ImageRGB, b: &ImageRGB) -> f64 {
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.pixels().len() as f64
}

#[test]
fn jpeg_mse_non_increasing_in_quality() {
    let img = texture(64, 64, 4);
    let errs: Vec<f64> = [70u8, 80, 90, 95, 100]
        .iter()
        .map(|&q| mse(&img, &jpeg_simulate(&img, q).unwrap()))
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] <= w[0], "{errs:?}");
    }
}

#[test]
fn jpeg_double_application_at_100_is_stable() {
    let img = texture(32, 24, 5);
    let once = jpeg_simulate(&img, 100).unwrap();
    let twice = jpeg_simulate(&once, 100).unwrap();
    let worst = once
        .pixels()
        .iter()
        .zip(twice.pixels())
        .map(|(a, b)| (*a as i32 - *b as i32).abs())
        .max()
        .unwrap();
    assert!(worst <= 1);
}

#[test]
fn quantization_step_definition() {
    let mut block = [0.0; 64];
    block[0] = 37.3;
    block[9] = -12.6;
    let step = 7.0;
    let coeffs = dct8x8_orthonormal(&block);
    let back = idct8x8_orthonormal(&coeffs);
    for (a, b) in block.iter().zip(&back) {
        assert!((a - b).abs() < 1e-12);
    }
    for &c in &coeffs {
        let q = quantize_dequantize(c, step);
        assert!((q - step * (c / step).round()).abs() < 1e-15);
        assert!((q / step).fract().abs() < 1e-12);
    }
}

#[test]
fn perturbations_are_pure_and_preserve_dimensions() {
    let img = texture(24, 16, 6);
    let a = jpeg_simulate(&img, 75).unwrap();
    let b = jpeg_simulate(&img, 75).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.width(), a.height()), (24, 16));
    let c = gaussian_blur(&img, 0.8).unwrap();
    assert_eq!(c, gaussian_blur(&img, 0.8).unwrap());
    assert_eq!((c.width(), c.height()), (24, 16));
}
