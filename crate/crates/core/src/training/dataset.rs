//! Procedural forgery dataset and a loader for image directories.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::fusion::NUM_TYPES;
use crate::image::{gaussian_blur, load_gray_u8, load_image, resize_bilinear, save_image, save_plane, ImagePlane, ImageRGB};

/// Class indices, matching [`crate::fusion::FORGERY_TYPES`].
pub const REAL: usize = 0;
pub const COPY_MOVE: usize = 1;
pub const SPLICING: usize = 2;
pub const RETOUCHING: usize = 3;
pub const GAN: usize = 4;
pub const DIFFUSION: usize = 5;
pub const DEEPFAKE: usize = 6;

/// Amplitude of the per-pixel sensor noise in authentic textures, in grey levels.
const SENSOR_NOISE: f64 = 6.0;
/// Detail-band gain of the GAN proxy.
const GAN_DETAIL_GAIN: f64 = 0.2;
const DIFFUSION_SIGMA: f64 = 2.0;
/// Amplitude of the re-injected noise of the diffusion proxy.
const DIFFUSION_NOISE: f64 = 12.0;
/// Amplitude of the checkerboard fingerprint in the spectral-cue set.
const CHECKER_AMPLITUDE: f64 = 4.0;

/// Axis-aligned rectangle `[x, y, w, h]` in pixels.
pub type Rect = [usize; 4];

/// How a sample was generated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Seed of the sample's own generator; regenerates the authentic base
    /// via [`real_base`].
    pub seed: u64,
    /// Manipulated rectangle (the bounding box for elliptic regions).
    pub region: Option<Rect>,
    /// Source rectangle of a copy-move.
    pub source: Option<Rect>,
}

/// Image, binary mask, authenticity label and manipulation type.
#[derive(Clone, Debug, PartialEq)]
pub struct ForgerySample {
    pub image: ImageRGB,
    pub mask: ImagePlane,
    /// 1 for manipulated.
    pub label: u8,
    pub mtype: usize,
    pub meta: SampleMeta,
}

impl ForgerySample {
    pub fn new(image: ImageRGB, mask: ImagePlane, mtype: usize, meta: SampleMeta) -> Result<Self> {
        if (mask.width(), mask.height()) != (image.width(), image.height()) {
            return Err(TrainError::Data(format!(
                "mask is {}x{}, image is {}x{}",
                mask.width(),
                mask.height(),
                image.width(),
                image.height()
            )));
        }
        if mtype >= NUM_TYPES {
            return Err(TrainError::Data(format!("type {mtype} outside [0, {NUM_TYPES})")));
        }
        if mask.values().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(TrainError::Data("mask is not binary".into()));
        }
        let empty = mask.values().iter().all(|&v| v == 0.0);
        if empty != (mtype == REAL) {
            return Err(TrainError::Data(format!("type {mtype} with an {} mask", if empty { "empty" } else { "nonempty" })));
        }
        let label = u8::from(mtype != REAL);
        Ok(Self { image, mask, label, mtype, meta })
    }
}

fn check_size(size: usize) -> Result<()> {
    if size < 32 || size % 8 != 0 {
        return Err(TrainError::Data(format!("image size {size} must be at least 32 and a multiple of 8")));
    }
    Ok(())
}

/// Float RGB canvas in grey levels, row-major interleaved.
struct Canvas {
    n: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn from_image(img: &ImageRGB) -> Self {
        Self {
            n: img.width(),
            px: img.pixels().iter().map(|&p| p as f64).collect(),
        }
    }

    fn to_image(&self) -> ImageRGB {
        let px = self.px.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        ImageRGB::new(self.n, self.n, px).expect("square canvas")
    }
}

/// Bilinear upsampling of a `(cells + 1)^2` lattice to `n x n`.
fn smooth_noise(rng: &mut ChaCha8Rng, n: usize, cells: usize) -> Vec<f64> {
    let m = cells + 1;
    let lattice: Vec<f64> = (0..m * m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        let fy = y as f64 * cells as f64 / n as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..n {
            let fx = x as f64 * cells as f64 / n as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |i: usize, j: usize| lattice[j * m + i];
            let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
            let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
            out[y * n + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// Authentic texture: three octaves of smooth noise with per-channel gains,
/// a linear illumination gradient and independent sensor noise.
pub fn real_base(size: usize, seed: u64) -> ImageRGB {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(70.0..180.0));
    let gains: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.3));
    let mut luma = vec![0.0; n * n];
    for (cells, amp) in [(2, 40.0), (4, 22.0), (8, 10.0)] {
        let layer = smooth_noise(&mut rng, n, cells);
        for (l, v) in luma.iter_mut().zip(layer) {
            *l += amp * v;
        }
    }
    let angle = rng.random_range(0.0..2.0 * PI);
    let slope = rng.random_range(0.0..40.0) / n as f64;
    let mut px = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let ramp = slope * ((x as f64 - n as f64 / 2.0) * angle.cos() + (y as f64 - n as f64 / 2.0) * angle.sin());
            let i = y * n + x;
            for c in 0..3 {
                let noise = rng.random_range(-SENSOR_NOISE..SENSOR_NOISE);
                px[3 * i + c] = base[c] + gains[c] * (luma[i] + ramp) + noise;
            }
        }
    }
    Canvas { n, px }.to_image()
}

fn random_rect(rng: &mut ChaCha8Rng, n: usize) -> Rect {
    let w = rng.random_range(n / 5..=n / 3);
    let h = rng.random_range(n / 5..=n / 3);
    [rng.random_range(2..n - w - 2), rng.random_range(2..n - h - 2), w, h]
}

fn overlaps(a: Rect, b: Rect) -> bool {
    a[0] < b[0] + b[2] && b[0] < a[0] + a[2] && a[1] < b[1] + b[3] && b[1] < a[1] + a[3]
}

fn rect_mask(n: usize, r: Rect) -> ImagePlane {
    ImagePlane::from_fn(n, n, |x, y| {
        f64::from(u8::from(x >= r[0] && x < r[0] + r[2] && y >= r[1] && y < r[1] + r[3]))
    })
    .expect("binary")
}

fn paste(dst: &mut ImageRGB, src: &ImageRGB, from: Rect, to: Rect) {
    for dy in 0..to[3] {
        for dx in 0..to[2] {
            dst.set(to[0] + dx, to[1] + dy, src.get(from[0] + dx, from[1] + dy));
        }
    }
}

/// Scales the Haar detail bands of every channel by `gain` (one level).
fn damp_haar_detail(img: &ImageRGB, gain: f64) -> ImageRGB {
    let mut c = Canvas::from_image(img);
    let n = c.n;
    for y in (0..n).step_by(2) {
        for x in (0..n).step_by(2) {
            for ch in 0..3 {
                let idx = |dx: usize, dy: usize| 3 * ((y + dy) * n + x + dx) + ch;
                let (a, b, cc, d) = (c.px[idx(0, 0)], c.px[idx(1, 0)], c.px[idx(0, 1)], c.px[idx(1, 1)]);
                let ll = (a + b + cc + d) / 4.0;
                let lh = gain * (a - b + cc - d) / 4.0;
                let hl = gain * (a + b - cc - d) / 4.0;
                let hh = gain * (a - b - cc + d) / 4.0;
                c.px[idx(0, 0)] = ll + lh + hl + hh;
                c.px[idx(1, 0)] = ll - lh + hl - hh;
                c.px[idx(0, 1)] = ll + lh - hl - hh;
                c.px[idx(1, 1)] = ll - lh - hl + hh;
            }
        }
    }
    c.to_image()
}

fn in_ellipse(x: usize, y: usize, e: [f64; 4]) -> bool {
    let (dx, dy) = ((x as f64 + 0.5 - e[0]) / e[2], (y as f64 + 0.5 - e[1]) / e[3]);
    dx * dx + dy * dy <= 1.0
}

fn ellipse_bbox(n: usize, e: [f64; 4]) -> Rect {
    let x0 = (e[0] - e[2]).floor().max(0.0) as usize;
    let y0 = (e[1] - e[3]).floor().max(0.0) as usize;
    let x1 = ((e[0] + e[2]).ceil() as usize).min(n);
    let y1 = ((e[1] + e[3]).ceil() as usize).min(n);
    [x0, y0, x1 - x0, y1 - y0]
}

/// Generates one sample of class `mtype` from its own seed.
pub fn gen_sample(mtype: usize, size: usize, seed: u64) -> Result<ForgerySample> {
    check_size(size)?;
    let n = size;
    let base = real_base(n, seed);
    // Sub-stream for everything beyond the base texture.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut meta = SampleMeta { seed, ..Default::default() };
    let full = || ImagePlane::filled(n, n, 1.0).expect("binary");
    let (image, mask) = match mtype {
        REAL => (base, ImagePlane::filled(n, n, 0.0).expect("binary")),
        COPY_MOVE => {
            let to = random_rect(&mut rng, n);
            let mut from = random_rect(&mut rng, n);
            from[2] = to[2];
            from[3] = to[3];
            from[0] = from[0].min(n - to[2] - 2);
            from[1] = from[1].min(n - to[3] - 2);
            while overlaps(from, to) {
                from[0] = rng.random_range(2..n - to[2] - 2);
                from[1] = rng.random_range(2..n - to[3] - 2);
            }
            let mut img = base.clone();
            paste(&mut img, &base, from, to);
            meta.region = Some(to);
            meta.source = Some(from);
            (img, rect_mask(n, to))
        }
        SPLICING => {
            let donor = real_base(n, rng.random());
            let to = random_rect(&mut rng, n);
            let from = [rng.random_range(0..=n - to[2]), rng.random_range(0..=n - to[3]), to[2], to[3]];
            let mut img = base;
            paste(&mut img, &donor, from, to);
            meta.region = Some(to);
            (img, rect_mask(n, to))
        }
        RETOUCHING => {
            let r = random_rect(&mut rng, n);
            let blurred = gaussian_blur(&base, 1.5)?;
            let shift = rng.random_range(20.0..40.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let mut c = Canvas::from_image(&base);
            for y in r[1]..r[1] + r[3] {
                for x in r[0]..r[0] + r[2] {
                    let p = blurred.get(x, y);
                    for ch in 0..3 {
                        c.px[3 * (y * n + x) + ch] = p[ch] as f64 + shift;
                    }
                }
            }
            meta.region = Some(r);
            (c.to_image(), rect_mask(n, r))
        }
        GAN => (damp_haar_detail(&base, GAN_DETAIL_GAIN), full()),
        DIFFUSION => {
            let mut c = Canvas::from_image(&gaussian_blur(&base, DIFFUSION_SIGMA)?);
            for v in &mut c.px {
                *v += rng.random_range(-DIFFUSION_NOISE..DIFFUSION_NOISE);
            }
            (c.to_image(), full())
        }
        DEEPFAKE => {
            let donor = real_base(n, rng.random());
            let nf = n as f64;
            let e = [
                nf / 2.0 + rng.random_range(-nf / 16.0..nf / 16.0),
                nf / 3.0 + rng.random_range(-nf / 16.0..nf / 16.0),
                rng.random_range(nf / 6.0..nf / 4.5),
                rng.random_range(nf / 5.0..nf / 4.0),
            ];
            let (amp, freq, phase) = (rng.random_range(1.5..3.0), rng.random_range(1.0..2.0), rng.random_range(0.0..2.0 * PI));
            let mut img = base;
            let mut m = vec![0.0; n * n];
            for y in 0..n {
                for x in 0..n {
                    if !in_ellipse(x, y, e) {
                        continue;
                    }
                    // Sinusoidal warp of the donor coordinates.
                    let sx = x as f64 + amp * (2.0 * PI * freq * y as f64 / nf + phase).sin();
                    let sy = y as f64 + amp * (2.0 * PI * freq * x as f64 / nf + phase).cos();
                    let sx = sx.round().clamp(0.0, nf - 1.0) as usize;
                    let sy = sy.round().clamp(0.0, nf - 1.0) as usize;
                    img.set(x, y, donor.get(sx, sy));
                    m[y * n + x] = 1.0;
                }
            }
            meta.region = Some(ellipse_bbox(n, e));
            (img, ImagePlane::new(n, n, m).expect("binary"))
        }
        _ => return Err(TrainError::Data(format!("type {mtype} outside [0, {NUM_TYPES})"))),
    };
    ForgerySample::new(image, mask, mtype, meta)
}

/// Per-sample seeds drawn from one ChaCha8 stream, in generation order.
fn sample_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random()).collect()
}

/// `n_per_class` samples of each of the seven types, interleaved by class.
pub fn gen_toy_dataset(n_per_class: usize, size: usize, seed: u64) -> Result<Vec<ForgerySample>> {
    check_size(size)?;
    if n_per_class == 0 {
        return Err(TrainError::Data("n_per_class must be positive".into()));
    }
    let seeds = sample_seeds(seed, n_per_class * NUM_TYPES);
    use rayon::prelude::*;
    seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| gen_sample(i % NUM_TYPES, size, s))
        .collect()
}

/// Authentic textures against the same textures carrying a faint
/// period-2 checkerboard, the classic upsampling fingerprint. The mark sits
/// at the Nyquist frequency, where 3x3 Sobel kernels cancel exactly and
/// Gaussian pre-smoothing removes almost all of it, so only frequency and
/// residual features can separate the classes.
pub fn gen_spectral_dataset(n_per_class: usize, size: usize, seed: u64) -> Result<Vec<ForgerySample>> {
    check_size(size)?;
    if n_per_class == 0 {
        return Err(TrainError::Data("n_per_class must be positive".into()));
    }
    let seeds = sample_seeds(seed, 2 * n_per_class);
    seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let base = real_base(size, s);
            let meta = SampleMeta { seed: s, ..Default::default() };
            if i % 2 == 0 {
                return ForgerySample::new(base, ImagePlane::filled(size, size, 0.0)?, REAL, meta);
            }
            let mut c = Canvas::from_image(&base);
            for y in 0..size {
                for x in 0..size {
                    let s = if (x + y) % 2 == 0 { CHECKER_AMPLITUDE } else { -CHECKER_AMPLITUDE };
                    for ch in 0..3 {
                        c.px[3 * (y * size + x) + ch] += s;
                    }
                }
            }
            ForgerySample::new(c.to_image(), ImagePlane::filled(size, size, 1.0)?, GAN, meta)
        })
        .collect()
}

/// Deterministic in-place shuffle.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    items.shuffle(rng);
}

/// Writes `images/NNNNN.png`, `masks/NNNNN.png` and `labels.csv`
/// (`file,label,type`) under `dir`.
pub fn save_dataset(samples: &[ForgerySample], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|source| TrainError::Io { path: p, source })?;
    }
    let mut csv = String::from("file,label,type\n");
    for (i, s) in samples.iter().enumerate() {
        let file = format!("{i:05}.png");
        save_image(&s.image, dir.join("images").join(&file))?;
        save_plane(&s.mask, dir.join("masks").join(&file))?;
        writeln!(csv, "{file},{},{}", s.label, s.mtype).expect("string write");
    }
    let p = dir.join("labels.csv");
    std::fs::write(&p, csv).map_err(|source| TrainError::Io { path: p, source })
}

/// Reads a directory laid out as by [`save_dataset`]. Images are resized to
/// `size` when given; masks follow with nearest-style rebinarization.
pub fn load_dataset(dir: impl AsRef<Path>, size: Option<usize>) -> Result<Vec<ForgerySample>> {
    let dir = dir.as_ref();
    let p = dir.join("labels.csv");
    let text = std::fs::read_to_string(&p).map_err(|source| TrainError::Io { path: p.clone(), source })?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("file,label,type") {
        return Err(TrainError::Data(format!("{}: header must be file,label,type", p.display())));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| TrainError::Data(format!("{}:{}: {what}", p.display(), ln + 2));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [file, label, mtype] = fields[..] else {
            return Err(bad("expected 3 fields"));
        };
        if file.contains('/') || file.contains('\\') || file.contains("..") {
            return Err(bad("file names must not contain path separators"));
        }
        let label: u8 = label.parse().map_err(|_| bad("label is not an integer"))?;
        let mtype: usize = mtype.parse().map_err(|_| bad("type is not an integer"))?;
        if label > 1 || (label == 0) != (mtype == REAL) {
            return Err(bad("label and type disagree"));
        }
        let mut image = load_image(dir.join("images").join(file))?;
        let mpath = dir.join("masks").join(file);
        let (mw, mh, mpx) = if mpath.exists() {
            load_gray_u8(&mpath)?
        } else if label == 0 {
            (image.width(), image.height(), vec![0; image.width() * image.height()])
        } else {
            return Err(bad("manipulated sample without a mask"));
        };
        let mut mask = ImagePlane::new(mw, mh, mpx.iter().map(|&v| f64::from(u8::from(v >= 128))).collect())?;
        if let Some(n) = size {
            image = resize_bilinear(&image, n, n)?;
            let resized = crate::image::resize_plane(&mask, n, n)?;
            mask = ImagePlane::new(n, n, resized.values().iter().map(|&v| f64::from(u8::from(v >= 0.5))).collect())?;
        }
        if label == 1 && mask.values().iter().all(|&v| v == 0.0) {
            return Err(bad("manipulated sample with an empty mask"));
        }
        out.push(ForgerySample::new(image, mask, mtype, SampleMeta::default())?);
    }
    if out.is_empty() {
        return Err(TrainError::Data(format!("{}: no samples", p.display())));
    }
    Ok(out)
}
