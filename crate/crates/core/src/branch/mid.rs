//! Edge operators, the k-means segmentation fallback, and the
//! boundary/edge alignment planes.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{embed_stream, filter_edge, gray_var, project_grid, stack_fields, BranchError, Field, Result};
use crate::image::{gaussian_blur, gaussian_blur_plane, gaussian_kernel, load_gray_u8, to_gray, ImagePlane, ImageRGB};
use crate::layers::{Binder, Conv, Linear, ParamStore, Standardize};
use crate::tensor::{ConvPadding, Graph, Tensor, Var};

/// Sobel kernels scaled by 1/4, so a unit step has gradient magnitude 1.
pub const SOBEL_X: [f64; 9] = [-0.25, 0.0, 0.25, -0.5, 0.0, 0.5, -0.25, 0.0, 0.25];
pub const SOBEL_Y: [f64; 9] = [-0.25, -0.5, -0.25, 0.0, 0.0, 0.0, 0.25, 0.5, 0.25];
pub const LAPLACIAN_5: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];

pub const CANNY_SIGMA: f64 = 1.0;
pub const CANNY_LOW: f64 = 0.1;
pub const CANNY_HIGH: f64 = 0.3;
pub const LOG_SIGMA: f64 = 1.0;
pub const SEG_K: usize = 8;
pub const SEG_MAX_K: usize = 19;
pub const SEG_XY_WEIGHT: f64 = 0.5;
pub const SEG_MAX_ITERS: usize = 50;
/// Pre-smoothing of the colors that k-means clusters.
pub const SEG_SIGMA: f64 = 1.0;
pub const ALIGN_RADIUS: usize = 2;
pub const MID_CONV_WIDTH: usize = 32;

/// Correlates with a 3x3 kernel under clamp-to-edge borders; taps act on
/// differences from the centre, so zero-sum kernels give exact zeros on flats.
fn correlate3(f: &Field, k: &[f64; 9]) -> Field {
    Field::from_fn(f.width(), f.height(), |x, y| {
        let c = f.get(x, y);
        let mut acc = 0.0;
        for dy in 0..3 {
            for dx in 0..3 {
                let v = f.at_clamped(x as isize + dx as isize - 1, y as isize + dy as isize - 1);
                acc += k[dy * 3 + dx] * (v - c);
            }
        }
        acc
    })
}

fn gradients(f: &Field) -> (Field, Field) {
    (correlate3(f, &SOBEL_X), correlate3(f, &SOBEL_Y))
}

fn hypot_field(gx: &Field, gy: &Field) -> Field {
    let v = gx.values().iter().zip(gy.values()).map(|(a, b)| a.hypot(*b)).collect();
    Field::new(gx.width(), gx.height(), v).expect("same extents")
}

pub fn sobel(gray: &ImagePlane) -> Field {
    let (gx, gy) = gradients(&Field::from(gray));
    hypot_field(&gx, &gy)
}

/// Gaussian blur followed by the 5-point Laplacian.
pub fn log_filter(gray: &ImagePlane, sigma: f64) -> Result<Field> {
    if !(sigma > 0.0) {
        return Err(BranchError::InvalidParameter(format!("LoG sigma must be positive, got {sigma}")));
    }
    let blurred = gaussian_blur_plane(gray, sigma)?;
    let k: [f64; 9] = LAPLACIAN_5;
    Ok(correlate3(&Field::from(&blurred), &k))
}

/// Canny edges as a `{0, 1}` field; thresholds are fractions of the
/// largest gradient magnitude.
pub fn canny(gray: &ImagePlane, sigma: f64, t_low: f64, t_high: f64) -> Result<Field> {
    if !(0.0 < t_low && t_low < t_high && t_high < 1.0) {
        return Err(BranchError::InvalidParameter(format!(
            "need 0 < t_low < t_high < 1, got {t_low}, {t_high}"
        )));
    }
    let blurred = gaussian_blur_plane(gray, sigma)?;
    let (gx, gy) = gradients(&Field::from(&blurred));
    let mag = hypot_field(&gx, &gy);
    let (w, h) = (mag.width(), mag.height());
    let peak = mag.max();
    if peak <= 0.0 {
        return Ok(Field::zeros(w, h));
    }

    let m = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag.get(x as usize, y as usize)
        }
    };
    let mut thin = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let v = mag.get(x, y);
            if v <= 0.0 {
                continue;
            }
            let mut angle = gy.get(x, y).atan2(gx.get(x, y)).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (dx, dy) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let (xi, yi) = (x as isize, y as isize);
            // Strict on one side, inclusive on the other: a plateau of two
            // equal maxima keeps exactly one pixel.
            if v > m(xi - dx, yi - dy) && v >= m(xi + dx, yi + dy) {
                thin[y * w + x] = v / peak;
            }
        }
    }

    let mut out = vec![0.0; w * h];
    let mut queue = VecDeque::new();
    for (i, &v) in thin.iter().enumerate() {
        if v >= t_high {
            out[i] = 1.0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0.0 && thin[j] >= t_low {
                    out[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(Field::new(w, h, out).expect("same extents"))
}

/// Canny, Sobel magnitude and LoG of one grayscale plane.
#[derive(Clone, Debug)]
pub struct EdgeMaps {
    pub canny: Field,
    pub sobel: Field,
    pub log: Field,
}

impl EdgeMaps {
    pub fn compute(gray: &ImagePlane) -> Result<Self> {
        Ok(Self {
            canny: canny(gray, CANNY_SIGMA, CANNY_LOW, CANNY_HIGH)?,
            sobel: sobel(gray),
            log: log_filter(gray, LOG_SIGMA)?,
        })
    }
}

/// Per-pixel region labels in `[0, k)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMap {
    width: usize,
    height: usize,
    k: usize,
    labels: Vec<u8>,
}

impl SegmentMap {
    pub fn new(width: usize, height: usize, k: usize, labels: Vec<u8>) -> Result<Self> {
        if !(1..=SEG_MAX_K).contains(&k) {
            return Err(BranchError::InvalidParameter(format!(
                "segment count must be in [1, {SEG_MAX_K}], got {k}"
            )));
        }
        if labels.len() != width * height || width == 0 {
            return Err(BranchError::Dimensions(format!(
                "{} labels for a {width}x{height} map",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(BranchError::InvalidParameter(format!("label {bad} outside [0, {k})")));
        }
        Ok(Self {
            width,
            height,
            k,
            labels,
        })
    }

    /// Reads an external label map stored as 8-bit gray values.
    pub fn from_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let (w, h, labels) = load_gray_u8(path)?;
        let k = labels.iter().copied().max().unwrap_or(0) as usize + 1;
        Self::new(w, h, k, labels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }
}

fn sq_dist(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Spatial-color k-means over `(R, G, B, 0.5 x, 0.5 y)` with colors in
/// 0..255 units, taken from the image blurred at [`SEG_SIGMA`] so that
/// pixel-level noise cannot fragment the regions. Centres start from a seeded pixel followed by farthest-point
/// picks; assignment ties go to the lowest cluster index.
pub fn segment(img: &ImageRGB, k: usize, seed: u64) -> Result<SegmentMap> {
    if !(1..=SEG_MAX_K).contains(&k) {
        return Err(BranchError::InvalidParameter(format!(
            "segment count must be in [1, {SEG_MAX_K}], got {k}"
        )));
    }
    let (w, h) = (img.width(), img.height());
    let smooth = gaussian_blur(img, SEG_SIGMA)?;
    let pts: Vec<[f64; 5]> = smooth
        .pixels()
        .chunks_exact(3)
        .enumerate()
        .map(|(i, p)| {
            [
                p[0] as f64,
                p[1] as f64,
                p[2] as f64,
                SEG_XY_WEIGHT * (i % w) as f64,
                SEG_XY_WEIGHT * (i / w) as f64,
            ]
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres = vec![pts[rng.random_range(0..pts.len())]];
    let mut nearest: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centres[0])).collect();
    while centres.len() < k {
        let mut best = 0;
        for (i, &d) in nearest.iter().enumerate() {
            if d > nearest[best] {
                best = i;
            }
        }
        let c = pts[best];
        for (n, p) in nearest.iter_mut().zip(&pts) {
            *n = n.min(sq_dist(p, &c));
        }
        centres.push(c);
    }

    let mut labels = vec![0u8; pts.len()];
    for iter in 0..SEG_MAX_ITERS {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(&pts) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centres.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            if *l as usize != best {
                *l = best as u8;
                changed = true;
            }
        }
        if !changed && iter > 0 {
            break;
        }
        let mut sums = vec![[0.0; 5]; k];
        let mut counts = vec![0usize; k];
        for (l, p) in labels.iter().zip(&pts) {
            let s = &mut sums[*l as usize];
            for j in 0..5 {
                s[j] += p[j];
            }
            counts[*l as usize] += 1;
        }
        for ((c, s), &n) in centres.iter_mut().zip(&sums).zip(&counts) {
            if n > 0 {
                *c = s.map(|v| v / n as f64);
            }
        }
    }
    SegmentMap::new(w, h, k, labels)
}

/// Pixels whose 4-neighbourhood contains more than one label.
pub fn boundary_plane(seg: &SegmentMap) -> Field {
    let (w, h) = (seg.width(), seg.height());
    Field::from_fn(w, h, |x, y| {
        let l = seg.get(x, y);
        let differs = (x > 0 && seg.get(x - 1, y) != l)
            || (x + 1 < w && seg.get(x + 1, y) != l)
            || (y > 0 && seg.get(x, y - 1) != l)
            || (y + 1 < h && seg.get(x, y + 1) != l);
        if differs {
            1.0
        } else {
            0.0
        }
    })
}

/// Largest Sobel magnitude within `ALIGN_RADIUS` of each boundary pixel; zero off the boundary.
pub fn alignment_plane(sobel: &Field, boundary: &Field) -> Result<Field> {
    if (sobel.width(), sobel.height()) != (boundary.width(), boundary.height()) {
        return Err(BranchError::Dimensions("edge and boundary planes differ in size".into()));
    }
    let (w, h) = (sobel.width(), sobel.height());
    let r = ALIGN_RADIUS;
    Ok(Field::from_fn(w, h, |x, y| {
        if boundary.get(x, y) == 0.0 {
            return 0.0;
        }
        let mut best: f64 = 0.0;
        for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
            for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                best = best.max(sobel.get(xx, yy));
            }
        }
        best
    }))
}

/// Mean of the alignment plane over boundary pixels; `None` without boundaries.
pub fn mean_alignment(align: &Field, boundary: &Field) -> Option<f64> {
    let mut n = 0usize;
    let mut s = 0.0;
    for (a, b) in align.values().iter().zip(boundary.values()) {
        if *b > 0.0 {
            n += 1;
            s += a;
        }
    }
    (n > 0).then(|| s / n as f64)
}

/// Mid-level planes of one image.
#[derive(Clone, Debug)]
pub struct MidFeatures {
    pub edges: EdgeMaps,
    pub boundary: Field,
    pub align: Field,
}

impl MidFeatures {
    pub fn extract(img: &ImageRGB, seg: &SegmentMap) -> Result<Self> {
        if (seg.width(), seg.height()) != (img.width(), img.height()) {
            return Err(BranchError::Dimensions(format!(
                "segment map is {}x{}, image is {}x{}",
                seg.width(),
                seg.height(),
                img.width(),
                img.height()
            )));
        }
        let edges = EdgeMaps::compute(&to_gray(img))?;
        let boundary = boundary_plane(seg);
        let align = alignment_plane(&edges.sobel, &boundary)?;
        Ok(Self { edges, boundary, align })
    }

    /// `[H, W, 5]` in `(canny, sobel, log, boundary, alignment)` order.
    pub fn to_tensor(&self) -> Tensor {
        let e = &self.edges;
        stack_fields(&[&e.canny, &e.sobel, &e.log, &self.boundary, &self.align]).expect("equal sizes")
    }

    pub fn bind(&self, g: &mut Graph) -> Var {
        g.constant(self.to_tensor())
    }

    /// Graph route; see [`mid_planes_graph`].
    pub fn bind_graph(&self, g: &mut Graph, rgb: Var) -> Result<Var> {
        mid_planes_graph(g, rgb, &self.to_tensor())
    }
}

/// Rebuilds the `[H, W, 5]` planes on the graph: Sobel and LoG are
/// recomputed from the `[H, W, 3]` image variable, while Canny, boundary
/// and alignment are taken from `fixed` (a [`MidFeatures::to_tensor`] result)
/// and carry no gradient.
pub fn mid_planes_graph(g: &mut Graph, rgb: Var, fixed: &Tensor) -> Result<Var> {
    let s = fixed.shape();
    if s.len() != 3 || s[2] != 5 || g.shape(rgb)[..2] != s[..2] {
        return Err(BranchError::Dimensions(format!(
            "mid planes {s:?} do not match image {:?}",
            g.shape(rgb)
        )));
    }
    let (h, w) = (s[0], s[1]);
    let gray = gray_var(g, rgb)?;
    let gx = filter_edge(g, gray, &SOBEL_X, 3, 3)?;
    let gy = filter_edge(g, gray, &SOBEL_Y, 3, 3)?;
    let sob = g.magnitude(gx, gy)?;

    let k = gaussian_kernel(LOG_SIGMA)?;
    let r = k.len() / 2;
    let padded = g.pad_edge(gray, 0, r)?;
    let kx = g.constant(Tensor::new(vec![1, k.len(), 1, 1], k.clone())?);
    let bx = g.conv2d(padded, kx, 1, ConvPadding::Valid)?;
    let padded = g.pad_edge(bx, r, 0)?;
    let ky = g.constant(Tensor::new(vec![k.len(), 1, 1, 1], k)?);
    let blurred = g.conv2d(padded, ky, 1, ConvPadding::Valid)?;
    let log = filter_edge(g, blurred, &LAPLACIAN_5, 3, 3)?;

    let channel = |g: &mut Graph, c: usize| {
        let v = fixed.data().chunks_exact(5).map(|p| p[c]).collect();
        g.constant(Tensor::new(vec![h, w, 1], v).expect("sized"))
    };
    let canny = channel(g, 0);
    let b = channel(g, 3);
    let a = channel(g, 4);
    Ok(g.concat_last(&[canny, sob, log, b, a])?)
}

/// Learned part of the mid branch.
#[derive(Clone, Debug)]
pub struct MidBranch {
    pub norm: Standardize,
    pub conv: Conv,
    pub proj: Linear,
}

impl MidBranch {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d_model: usize) -> Self {
        Self {
            norm: Standardize::new(store, "mid.norm", 5),
            conv: Conv::new(store, rng, "mid.conv", 3, 5, MID_CONV_WIDTH),
            proj: Linear::new(store, rng, "mid.proj", MID_CONV_WIDTH, d_model),
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
