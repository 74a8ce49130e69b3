//! Physical plausibility cues: shadow direction consistency, reflection
//! symmetry and pseudo-depth coherence.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::mid::SegmentMap;
use super::{embed_stream, project_grid, stack_fields, BranchError, Field, Result};
use crate::image::{gaussian_blur_plane, load_gray_u8, resize_plane, to_gray, ImagePlane, ImageRGB};
use crate::layers::{Binder, Conv, Linear, ParamStore, Standardize};
use crate::tensor::{Graph, Tensor, Var};

pub const SHADOW_LUMA_RATIO: f64 = 0.35;
pub const SHADOW_SAT_DROP: f64 = 0.2;
pub const SHADOW_MIN_AREA: usize = 30;
/// Half-width of the box over which surround saturation is averaged.
pub const SURROUND_RADIUS: usize = 7;
pub const DEPTH_SIGMA: f64 = 4.0;
pub const HIGH_CONV_WIDTH: usize = 32;
/// Used when no light direction can be estimated: light from above.
pub const DEFAULT_LIGHT: [f64; 2] = [0.0, -1.0];

/// A connected shadow candidate region.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowRegion {
    pub id: usize,
    pub area: usize,
    /// `(x, y)` in pixels.
    pub centroid: (f64, f64),
    /// `(x0, y0, x1, y1)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
    pixels: Vec<usize>,
}

impl ShadowRegion {
    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }
}

#[derive(Clone, Debug)]
pub struct ShadowDetection {
    pub mask: Field,
    pub regions: Vec<ShadowRegion>,
}

fn saturation(p: &[u8]) -> f64 {
    let mx = p.iter().copied().max().unwrap() as f64;
    let mn = p.iter().copied().min().unwrap() as f64;
    if mx == 0.0 {
        0.0
    } else {
        (mx - mn) / mx
    }
}

/// Box mean with clamped window bounds, via a summed-area table.
fn box_mean(values: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut sat = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] =
                values[y * w + x] + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
            out[y * w + x] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Shadow candidates are pixels darker than `0.35` of the mean luma whose
/// saturation is at most `0.2` below the surround mean (shadows keep their
/// chromaticity). 4-connected components of at least 30 pixels are regions.
pub fn detect_shadows(img: &ImageRGB) -> ShadowDetection {
    let (w, h) = (img.width(), img.height());
    let gray = to_gray(img);
    let luma = gray.values();
    let mean = luma.iter().sum::<f64>() / luma.len() as f64;
    let sat: Vec<f64> = img.pixels().chunks_exact(3).map(saturation).collect();
    let surround = box_mean(&sat, w, h, SURROUND_RADIUS);
    let cand: Vec<bool> = (0..w * h)
        .map(|i| luma[i] < SHADOW_LUMA_RATIO * mean && surround[i] - sat[i] < SHADOW_SAT_DROP)
        .collect();

    let mut seen = vec![false; w * h];
    let mut mask = vec![0.0; w * h];
    let mut regions = Vec::new();
    for start in 0..w * h {
        if !cand[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if cand[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if pixels.len() < SHADOW_MIN_AREA {
            continue;
        }
        pixels.sort_unstable();
        let n = pixels.len() as f64;
        let (mut sx, mut sy) = (0.0, 0.0);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        for &i in &pixels {
            let (x, y) = (i % w, i / w);
            sx += x as f64;
            sy += y as f64;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            mask[i] = 1.0;
        }
        regions.push(ShadowRegion {
            id: regions.len(),
            area: pixels.len(),
            centroid: (sx / n, sy / n),
            bbox: (x0, y0, x1, y1),
            pixels,
        });
    }
    ShadowDetection {
        mask: Field::new(w, h, mask).expect("sized"),
        regions,
    }
}

/// A shadow region and the object assumed to cast it.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPair {
    pub object_centroid: (f64, f64),
    pub shadow_centroid: (f64, f64),
    /// Segment label of the object.
    pub object_id: usize,
    /// Index into the detected shadow regions.
    pub shadow_id: usize,
}

/// Pairs every shadow with the segment it touches most along its 4-connected
/// border. The object centroid is taken over that segment's non-shadow
/// pixels near the shadow (its bounding box grown by its larger side).
pub fn pair_shadows(shadows: &ShadowDetection, seg: &SegmentMap) -> Result<Vec<RegionPair>> {
    let (w, h) = (shadows.mask.width(), shadows.mask.height());
    if (seg.width(), seg.height()) != (w, h) {
        return Err(BranchError::Dimensions("segment map and shadow mask differ in size".into()));
    }
    let in_shadow = |i: usize| shadows.mask.values()[i] > 0.0;
    let mut pairs = Vec::new();
    for r in &shadows.regions {
        let mut contacts = vec![0usize; seg.k()];
        for &i in r.pixels() {
            let (x, y) = (i % w, i / w);
            let nbrs = [
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
            ];
            for j in nbrs.into_iter().flatten() {
                if !in_shadow(j) {
                    contacts[seg.labels()[j] as usize] += 1;
                }
            }
        }
        let Some((label, _)) = contacts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .fold(None, |best: Option<(usize, usize)>, (l, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((l, c)),
            })
        else {
            continue;
        };
        let (x0, y0, x1, y1) = r.bbox;
        let grow = (x1 - x0).max(y1 - y0) + 1;
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in y0.saturating_sub(grow)..(y1 + grow + 1).min(h) {
            for x in x0.saturating_sub(grow)..(x1 + grow + 1).min(w) {
                let i = y * w + x;
                if !in_shadow(i) && seg.labels()[i] as usize == label {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        pairs.push(RegionPair {
            object_centroid: (sx / n as f64, sy / n as f64),
            shadow_centroid: r.centroid,
            object_id: label,
            shadow_id: r.id,
        });
    }
    Ok(pairs)
}

/// Unit vector from the image centre toward the centroid of the brightest
/// 1% of pixels; `None` when that centroid is the centre itself.
pub fn estimate_light_dir(img: &ImageRGB) -> Option<[f64; 2]> {
    let gray = to_gray(img);
    let (w, h) = (gray.width(), gray.height());
    let mut order: Vec<usize> = (0..w * h).collect();
    order.sort_by(|&a, &b| gray.values()[b].total_cmp(&gray.values()[a]).then(a.cmp(&b)));
    let n = (w * h).div_ceil(100);
    let (mut sx, mut sy) = (0.0, 0.0);
    for &i in &order[..n] {
        sx += (i % w) as f64;
        sy += (i / w) as f64;
    }
    let dx = sx / n as f64 - (w as f64 - 1.0) / 2.0;
    let dy = sy / n as f64 - (h as f64 - 1.0) / 2.0;
    let norm = dx.hypot(dy);
    (norm > 1e-9).then(|| [dx / norm, dy / norm])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShadowScores {
    pub per_pair: Vec<f64>,
    /// Mean of `per_pair`; 1.0 when no pair could be scored.
    pub aggregate: f64,
}

/// Cosine between the observed object-to-shadow direction and the expected
/// one, `-light_dir`. Pairs with coincident centroids are skipped.
pub fn shadow_consistency(pairs: &[RegionPair], light_dir: [f64; 2]) -> Result<ShadowScores> {
    let ln = light_dir[0].hypot(light_dir[1]);
    if !(ln > 0.0) || !ln.is_finite() {
        return Err(BranchError::InvalidParameter(format!(
            "light direction must be a nonzero vector, got {light_dir:?}"
        )));
    }
    let expected = [-light_dir[0] / ln, -light_dir[1] / ln];
    let mut per_pair = Vec::with_capacity(pairs.len());
    for p in pairs {
        let dx = p.shadow_centroid.0 - p.object_centroid.0;
        let dy = p.shadow_centroid.1 - p.object_centroid.1;
        let n = dx.hypot(dy);
        if !(n > 1e-12) {
            log::warn!("shadow {} coincides with its object; pair skipped", p.shadow_id);
            continue;
        }
        per_pair.push(((dx * expected[0] + dy * expected[1]) / n).clamp(-1.0, 1.0));
    }
    let aggregate = if per_pair.is_empty() {
        1.0
    } else {
        per_pair.iter().sum::<f64>() / per_pair.len() as f64
    };
    Ok(ShadowScores { per_pair, aggregate })
}

/// Normalized cross-correlation between the band below `axis_row` and the
/// mirrored band above it. Row `axis_row + i` pairs with row `axis_row - 1 - i`.
/// A zero-variance band scores 0.
pub fn reflection_symmetry(gray: &ImagePlane, axis_row: usize) -> Result<f64> {
    let (w, h) = (gray.width(), gray.height());
    if axis_row == 0 || axis_row >= h {
        return Err(BranchError::InvalidParameter(format!(
            "reflection axis {axis_row} must lie strictly inside 0..{h}"
        )));
    }
    let band = axis_row.min(h - axis_row);
    let mut below = Vec::with_capacity(band * w);
    let mut above = Vec::with_capacity(band * w);
    for i in 0..band {
        for x in 0..w {
            below.push(gray.get(x, axis_row + i));
            above.push(gray.get(x, axis_row - 1 - i));
        }
    }
    Ok(ncc(&below, &above))
}

fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let flat = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if flat(a) || flat(b) {
        return 0.0;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

/// Relative depth in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap(Field);

impl DepthMap {
    pub fn new(field: Field) -> Result<Self> {
        if field.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(BranchError::InvalidParameter("depth values must lie in [0, 1]".into()));
        }
        Ok(Self(field))
    }

    /// Reads an 8-bit gray file as `value / 255`.
    pub fn from_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let (w, h, v) = load_gray_u8(path)?;
        Self::new(Field::new(w, h, v.iter().map(|&b| b as f64 / 255.0).collect())?)
    }

    pub fn field(&self) -> &Field {
        &self.0
    }

    pub fn resized(&self, width: usize, height: usize) -> Result<Self> {
        if (width, height) == (self.0.width(), self.0.height()) {
            return Ok(self.clone());
        }
        let plane = ImagePlane::new(self.0.width(), self.0.height(), self.0.values().to_vec())?;
        let r = resize_plane(&plane, width, height)?;
        Ok(Self(Field::from(&r)))
    }
}

/// Blurred luma (sigma 4), min-max normalized; a flat result maps to 0.5.
pub fn pseudo_depth(img: &ImageRGB) -> DepthMap {
    let blurred = gaussian_blur_plane(&to_gray(img), DEPTH_SIGMA).expect("positive sigma");
    let v = blurred.values();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi > lo {
        v.iter().map(|x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.5; v.len()]
    };
    DepthMap(Field::new(blurred.width(), blurred.height(), values).expect("sized"))
}

/// `-(mean |dZ/dx| + mean |dZ/dy|) + lambda * mean sqrt(dZ/dx^2 + dZ/dy^2)`
/// with forward differences; each mean runs over the positions where its
/// differences exist.
pub fn depth_coherence(z: &Field, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(BranchError::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
    }
    let (w, h) = (z.width(), z.height());
    let mean_abs = |count: usize, sum: f64| if count == 0 { 0.0 } else { sum / count as f64 };
    let mut sx = 0.0;
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            sx += (z.get(x + 1, y) - z.get(x, y)).abs();
        }
    }
    let mut sy = 0.0;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            sy += (z.get(x, y + 1) - z.get(x, y)).abs();
        }
    }
    let l1 = mean_abs((w - 1) * h, sx) + mean_abs(w * (h - 1), sy);
    let mut tv = 0.0;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let dx = z.get(x + 1, y) - z.get(x, y);
            let dy = z.get(x, y + 1) - z.get(x, y);
            tv += dx.hypot(dy);
        }
    }
    let tv = mean_abs((w - 1) * (h - 1), tv);
    Ok(-l1 + lambda * tv)
}

/// Pointwise forward-difference gradient magnitude; differences past the border are zero.
pub fn depth_gradient(z: &Field) -> Field {
    let (w, h) = (z.width(), z.height());
    Field::from_fn(w, h, |x, y| {
        let dx = if x + 1 < w { z.get(x + 1, y) - z.get(x, y) } else { 0.0 };
        let dy = if y + 1 < h { z.get(x, y + 1) - z.get(x, y) } else { 0.0 };
        dx.hypot(dy)
    })
}

/// Options for [`HighFeatures::extract`].
#[derive(Clone, Debug, Default)]
pub struct HighOptions {
    pub depth: Option<DepthMap>,
    /// Defaults to the horizontal midline.
    pub axis_row: Option<usize>,
    pub light_dir: Option<[f64; 2]>,
    pub lambda: f64,
}

/// High-level cues of one image.
#[derive(Clone, Debug)]
pub struct HighFeatures {
    pub shadow: ShadowScores,
    pub reflection: f64,
    pub depth: DepthMap,
    pub depth_grad: Field,
    pub coherence: f64,
}

impl HighFeatures {
    pub fn extract(img: &ImageRGB, seg: &SegmentMap, opts: &HighOptions) -> Result<Self> {
        let (w, h) = (img.width(), img.height());
        let shadows = detect_shadows(img);
        let pairs = pair_shadows(&shadows, seg)?;
        let light = opts
            .light_dir
            .or_else(|| estimate_light_dir(img))
            .unwrap_or(DEFAULT_LIGHT);
        let shadow = shadow_consistency(&pairs, light)?;
        let reflection = reflection_symmetry(&to_gray(img), opts.axis_row.unwrap_or(h / 2))?;
        let depth = match &opts.depth {
            Some(d) => d.resized(w, h)?,
            None => pseudo_depth(img),
        };
        let depth_grad = depth_gradient(depth.field());
        let coherence = depth_coherence(depth.field(), opts.lambda)?;
        Ok(Self {
            shadow,
            reflection,
            depth,
            depth_grad,
            coherence,
        })
    }

    /// `[H, W, 4]` in `(shadow score, reflection score, depth, depth gradient)` order.
    pub fn to_tensor(&self) -> Tensor {
        let z = self.depth.field();
        let (w, h) = (z.width(), z.height());
        let s = Field::new(w, h, vec![self.shadow.aggregate; w * h]).expect("sized");
        let r = Field::new(w, h, vec![self.reflection; w * h]).expect("sized");
        stack_fields(&[&s, &r, z, &self.depth_grad]).expect("equal sizes")
    }

    pub fn bind(&self, g: &mut Graph) -> Var {
        g.constant(self.to_tensor())
    }
}

/// Learned part of the high branch.
#[derive(Clone, Debug)]
pub struct HighBranch {
    pub norm: Standardize,
    pub conv: Conv,
    pub proj: Linear,
}

impl HighBranch {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d_model: usize) -> Self {
        Self {
            norm: Standardize::new(store, "high.norm", 4),
            conv: Conv::new(store, rng, "high.conv", 3, 4, HIGH_CONV_WIDTH),
            proj: Linear::new(store, rng, "high.proj", HIGH_CONV_WIDTH, d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder<'_>, planes: Var, grid: usize) -> Result<Var> {
        let s = embed_stream(g, p, &self.norm, &self.conv, planes, grid)?;
        project_grid(g, p, &self.proj, &[s], grid)
    }

    pub fn fit_norms(&self, store: &mut ParamStore, planes: &[&Tensor]) {
        self.norm.fit(store, planes.iter().copied());
    }
}
