use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::high::*;
use super::low::*;
use super::mid::*;
use super::*;
use crate::image::{gaussian_blur_plane, to_gray, ImagePlane, ImageRGB};
use crate::layers::{param_grad_check, Binder, ParamStore};
use crate::tensor::{Graph, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn noise_plane(w: usize, h: usize, seed: u64) -> ImagePlane {
    let mut r = rng(seed);
    ImagePlane::new(w, h, (0..w * h).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn noise_rgb(w: usize, h: usize, seed: u64) -> ImageRGB {
    let mut r = rng(seed);
    ImageRGB::new(w, h, (0..3 * w * h).map(|_| r.random()).collect()).unwrap()
}

fn gray_rgb(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> ImageRGB {
    let mut px = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            let v = f(x, y);
            px.extend([v, v, v]);
        }
    }
    ImageRGB::new(w, h, px).unwrap()
}

fn plane(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> ImagePlane {
    let mut v = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            v.push(f(x, y));
        }
    }
    ImagePlane::new(w, h, v).unwrap()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Literal quadruple sum over one block.
fn dct_oracle(block: &[f64; 64]) -> [f64; 64] {
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            let mut s = 0.0;
            for x in 0..8 {
                for y in 0..8 {
                    s += block[x * 8 + y]
                        * (PI * u as f64 * (2 * x + 1) as f64 / 16.0).cos()
                        * (PI * v as f64 * (2 * y + 1) as f64 / 16.0).cos();
                }
            }
            out[u * 8 + v] = s;
        }
    }
    out
}

#[test]
fn dct_of_constant_block_is_pure_dc() {
    let d = dct8x8(&[1.0; 64]);
    assert!((d[0] - 64.0).abs() < 1e-12);
    assert!(d[1..].iter().all(|c| c.abs() < 1e-12));
    let grid = block_dct(&ImagePlane::filled(16, 8, 1.0).unwrap()).unwrap();
    assert_eq!((grid.blocks_x(), grid.blocks_y()), (2, 1));
    assert!((grid.block(1, 0)[0] - 64.0).abs() < 1e-12);
}

#[test]
fn dct_cosine_row_pattern_concentrates_on_that_row() {
    for u0 in 0..8 {
        let mut block = [0.0; 64];
        for x in 0..8 {
            for y in 0..8 {
                block[x * 8 + y] = (PI * u0 as f64 * (2 * x + 1) as f64 / 16.0).cos();
            }
        }
        let d = dct8x8(&block);
        for (i, c) in d.iter().enumerate() {
            if i != u0 * 8 {
                assert!(c.abs() < 1e-10, "u0={u0} leaked into {i}: {c}");
            }
        }
        // Energy of the pattern row: 64 for the DC row, 32 otherwise.
        let expected = if u0 == 0 { 64.0 } else { 32.0 };
        assert!((d[u0 * 8] - expected).abs() < 1e-10);
    }
}

#[test]
fn dct_matches_quadruple_sum_on_random_blocks() {
    let mut r = rng(11);
    for _ in 0..1000 {
        let block: [f64; 64] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        let fast = dct8x8(&block);
        let slow = dct_oracle(&block);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10);
        }
        let back = idct8x8(&fast);
        for (a, b) in back.iter().zip(&block) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn block_dct_reconstructs_and_rejects_bad_sizes() {
    let p = noise_plane(24, 16, 3);
    let grid = block_dct(&p).unwrap();
    let rec = grid.reconstruct();
    for (a, b) in rec.values().iter().zip(p.values()) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!(matches!(block_dct(&noise_plane(20, 16, 1)), Err(BranchError::Dimensions(_))));
}

#[test]
fn haar_examples() {
    let flat = ImagePlane::filled(8, 6, 0.37).unwrap();
    let s = haar_dwt(&flat).unwrap();
    for band in [&s.lh, &s.hl, &s.hh] {
        assert!(band.values().iter().all(|&v| v == 0.0));
    }

    let (a, b) = (0.9, 0.2);
    let stripes = plane(8, 8, |x, _| if x % 2 == 0 { a } else { b });
    let s = haar_dwt(&stripes).unwrap();
    assert!(s.lh.values().iter().all(|&v| (v - (a - b)).abs() < 1e-15));
    assert!(s.hl.values().iter().all(|&v| v.abs() < 1e-15));
    assert!(s.hh.values().iter().all(|&v| v.abs() < 1e-15));

    let p = noise_plane(10, 6, 4);
    let rec = haar_dwt(&p).unwrap().reconstruct();
    for (x, y) in rec.values().iter().zip(p.values()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(matches!(haar_dwt(&noise_plane(9, 8, 1)), Err(BranchError::Dimensions(_))));
}

#[test]
fn low_pass_noise_has_less_diagonal_detail() {
    let noise = noise_plane(64, 64, 5);
    let smooth = gaussian_blur_plane(&noise, 1.5).unwrap();
    let mean_hh = |p: &ImagePlane| {
        let s = haar_dwt(p).unwrap();
        s.hh.values().iter().map(|v| v.abs()).sum::<f64>() / s.hh.values().len() as f64
    };
    assert!(mean_hh(&smooth) < mean_hh(&noise));
}

#[test]
fn srm_bank_is_zero_sum_and_frozen() {
    let bank = srm_bank();
    assert_eq!(bank.len(), 30);
    for k in bank.iter() {
        assert_eq!(k.taps.iter().map(|&t| t as i32).sum::<i32>(), 0, "{}", k.name);
        assert!(k.divisor > 0.0);
    }
    assert_eq!(srm_bank_hash(bank), SRM_BANK_SHA256);
}

#[test]
fn srm_constant_and_ramp() {
    let flat = gray_rgb(12, 10, |_, _| 173);
    assert!(srm_residuals(&flat).data().iter().all(|&v| v == 0.0));

    // Horizontal ramp of slope 4 gray levels; the eastward first difference
    // reads the slope at every pixel that has an east neighbour.
    let ramp = gray_rgb(16, 9, |x, _| (4 * x) as u8);
    let res = srm_residuals(&ramp);
    let east = SRM_KERNELS.iter().position(|k| k.name == "first_e").unwrap();
    let slope = to_gray(&ramp).get(1, 0) - to_gray(&ramp).get(0, 0);
    for y in 0..9 {
        for x in 0..15 {
            let v = res.data()[(y * 16 + x) * 30 + east];
            assert!((v - slope).abs() < 1e-12, "({x},{y}) {v} vs {slope}");
        }
    }
}

/// Frozen output of this implementation on a fixed 16x16 image.
const SRM_GOLDEN_SHA256: &str = "1361a890e6670d10c077d1c783e36ac87d225e0d9cef083495208d29925d61b8";

#[test]
fn srm_golden_residuals() {
    let img = noise_rgb(16, 16, 2024);
    let res = srm_residuals(&img);
    assert_eq!(res.shape(), &[16, 16, 30]);
    let mut h = Sha256::new();
    for v in res.data() {
        h.update(v.to_le_bytes());
    }
    assert_eq!(hex(&h.finalize()), SRM_GOLDEN_SHA256);
}

#[test]
fn graph_route_matches_direct_low_features() {
    let img = noise_rgb(24, 16, 8);
    let direct = LowFeatures::extract(&img).unwrap();
    let mut g = Graph::new();
    let x = g.constant(image_tensor(&img));
    let [dct, dwt, srm] = low_features_graph(&mut g, x).unwrap();
    assert!(g.value(dct).max_abs_diff(&direct.dct) < 1e-12);
    assert!(g.value(dwt).max_abs_diff(&direct.dwt) < 1e-12);
    assert!(g.value(srm).max_abs_diff(&direct.srm) < 1e-12);
}

fn projection_loss(g: &mut Graph, tokens: crate::tensor::Var, seed: u64) -> crate::tensor::Result<crate::tensor::Var> {
    let shape = g.shape(tokens).to_vec();
    let n: usize = shape.iter().product();
    let mut r = rng(seed);
    let w = g.constant(Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())?);
    g.dot(tokens, w)
}

#[test]
fn low_branch_shapes_and_zero_image() {
    let mut store = ParamStore::new();
    let branch = LowBranch::new(&mut store, &mut rng(1), 256);
    let img = noise_rgb(64, 64, 3);
    let feats = LowFeatures::extract(&img).unwrap();
    let mut g = Graph::new();
    let mut p = Binder::new(&store, false);
    let vars = feats.bind(&mut g);
    let t = branch.forward(&mut g, &mut p, vars, 8).unwrap();
    assert_eq!(g.shape(t), &[64, 256]);
    assert!(g.value(t).all_finite());

    let black = ImageRGB::filled(64, 64, [0, 0, 0]).unwrap();
    let feats = LowFeatures::extract(&black).unwrap();
    let vars = feats.bind(&mut g);
    let t = branch.forward(&mut g, &mut p, vars, 8).unwrap();
    assert!(g.value(t).data().iter().all(|&v| v == 0.0));
}

#[test]
fn low_branch_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let branch = LowBranch::new(&mut store, &mut rng(2), 8);
    let img = noise_rgb(16, 16, 4);
    let feats = LowFeatures::extract(&img).unwrap();
    branch.fit_norms(&mut store, &[&feats]);
    let (err, name) = param_grad_check(
        &store,
        |g, p| -> Result<_> {
            let vars = feats.bind(g);
            let t = branch.forward(g, p, vars, 2)?;
            Ok(projection_loss(g, t, 9)?)
        },
        6,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{name}: {err}");

    // Input gradient through the differentiable feature route.
    let err = crate::tensor::finite_diff_check_multi(
        |g, v| {
            let mut p = Binder::new(&store, false);
            let vars = low_features_graph(g, v[0]).map_err(|e| crate::tensor::TensorError::Contract(e.to_string()))?;
            let t = branch.forward(g, &mut p, vars, 2).map_err(|e| crate::tensor::TensorError::Contract(e.to_string()))?;
            projection_loss(g, t, 9)
        },
        &[image_tensor(&img)],
        1e-5,
        Some(&(0..16 * 16 * 3).step_by(37).map(|j| (0, j)).collect::<Vec<_>>()),
    )
    .unwrap();
    assert!(err < 1e-5, "image input: {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn haar_details_vanish_on_flat_cells(vals in proptest::collection::vec(0.0f64..1.0, 16)) {
        // 8x8 image whose 2x2 cells are each constant.
        let p = plane(8, 8, |x, y| vals[(y / 2) * 4 + x / 2]);
        let s = haar_dwt(&p).unwrap();
        for band in [&s.lh, &s.hl, &s.hh] {
            prop_assert!(band.values().iter().all(|&v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn shadow_scores_bounded_and_translation_invariant(
        ox in 0.0f64..60.0, oy in 0.0f64..60.0,
        sx in 0.0f64..60.0, sy in 0.0f64..60.0,
        lx in -1.0f64..1.0, ly in -1.0f64..1.0,
        tx in -20.0f64..20.0, ty in -20.0f64..20.0,
    ) {
        prop_assume!((lx * lx + ly * ly) > 1e-6);
        prop_assume!((ox - sx).hypot(oy - sy) > 1e-3);
        let pair = |dx: f64, dy: f64| RegionPair {
            object_centroid: (ox + dx, oy + dy),
            shadow_centroid: (sx + dx, sy + dy),
            object_id: 0,
            shadow_id: 0,
        };
        let a = shadow_consistency(&[pair(0.0, 0.0)], [lx, ly]).unwrap();
        let b = shadow_consistency(&[pair(tx, ty)], [lx, ly]).unwrap();
        prop_assert!((-1.0..=1.0).contains(&a.aggregate));
        prop_assert!((a.aggregate - b.aggregate).abs() < 1e-9);
    }

    #[test]
    fn mirrored_images_score_one(vals in proptest::collection::vec(0.0f64..1.0, 40), axis in 1usize..7) {
        // 5 columns, rows mirrored about `axis` within an 8-row image.
        let h = 8;
        let p = plane(5, h, |x, y| {
            let m = if y >= axis { y - axis } else { axis - 1 - y };
            vals[(m % 8) * 5 + x]
        });
        let band = axis.min(h - axis);
        let s = reflection_symmetry(&p, axis).unwrap();
        // Only the overlapping band is compared, and it mirrors exactly.
        let flat = (0..band).all(|i| (0..5).all(|x| p.get(x, axis + i) == p.get(0, axis)));
        if !flat {
            prop_assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn depth_coherence_shift_and_scale(vals in proptest::collection::vec(0.0f64..0.5, 30), c in 0.0f64..0.5, a in 0.1f64..2.0) {
        let z = Field::new(6, 5, vals.clone()).unwrap();
        let shifted = Field::new(6, 5, vals.iter().map(|v| v + c).collect()).unwrap();
        let scaled = Field::new(6, 5, vals.iter().map(|v| v * a).collect()).unwrap();
        let base = depth_coherence(&z, 0.0).unwrap();
        prop_assert!((depth_coherence(&shifted, 0.0).unwrap() - base).abs() < 1e-12);
        prop_assert!((depth_coherence(&scaled, 0.0).unwrap() - a * base).abs() < 1e-12);
        prop_assert!((depth_coherence(&shifted, 0.7).unwrap() - depth_coherence(&z, 0.7).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn edge_operators_shift_equivariant(seed in 0u64..1000) {
        let big = noise_plane(20, 20, seed);
        let a = plane(18, 18, |x, y| big.get(x, y));
        let b = plane(18, 18, |x, y| big.get(x + 1, y + 1));
        let (sa, sb) = (sobel(&a), sobel(&b));
        let (la, lb) = (log_filter(&a, 1.0).unwrap(), log_filter(&b, 1.0).unwrap());
        // Away from borders (LoG support is 3 sigma plus the Laplacian).
        for y in 6..12 {
            for x in 6..12 {
                prop_assert!((sa.get(x + 1, y + 1) - sb.get(x, y)).abs() < 1e-12);
                prop_assert!((la.get(x + 1, y + 1) - lb.get(x, y)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sobel_examples() {
    let flat = ImagePlane::filled(10, 10, 0.4).unwrap();
    assert!(sobel(&flat).values().iter().all(|&v| v == 0.0));

    let step = plane(16, 8, |x, _| if x >= 8 { 1.0 } else { 0.0 });
    let s = sobel(&step);
    assert!((s.max() - 1.0).abs() < 1e-15);
    assert!((s.get(7, 4) - 1.0).abs() < 1e-15 && (s.get(8, 4) - 1.0).abs() < 1e-15);
    assert_eq!(s.get(2, 4), 0.0);
    assert_eq!(s.get(13, 4), 0.0);

    // Rotating the input by 90 degrees rotates the magnitude field.
    let p = noise_plane(9, 7, 12);
    let rot = plane(7, 9, |x, y| p.get(y, 6 - x));
    let (sp, sr) = (sobel(&p), sobel(&rot));
    for y in 0..9 {
        for x in 0..7 {
            assert!((sr.get(x, y) - sp.get(y, 6 - x)).abs() < 1e-12);
        }
    }
}

#[test]
fn log_examples() {
    let flat = ImagePlane::filled(12, 12, 0.6).unwrap();
    assert!(log_filter(&flat, 1.5).unwrap().values().iter().all(|&v| v == 0.0));
    assert!(log_filter(&flat, 0.0).is_err());

    let ramp = plane(32, 32, |x, y| (0.01 * x as f64 + 0.02 * y as f64).min(1.0));
    let l = log_filter(&ramp, 1.0).unwrap();
    for y in 5..27 {
        for x in 5..27 {
            assert!(l.get(x, y).abs() < 1e-12);
        }
    }
}

#[test]
fn log_of_impulse_matches_sampled_laplacian_of_gaussian() {
    let sigma = 2.0;
    let n = 33;
    let c = 16;
    let impulse = plane(n, n, |x, y| if (x, y) == (c, c) { 1.0 } else { 0.0 });
    let out = log_filter(&impulse, sigma).unwrap();

    // Discrete reference: the 5-point Laplacian of the normalized sampled Gaussian.
    let r = (3.0 * sigma).ceil() as i64;
    let norm: f64 = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).sum();
    let g1 = |i: i64| {
        if i.abs() > r {
            0.0
        } else {
            (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() / norm
        }
    };
    let g2 = |x: i64, y: i64| g1(x) * g1(y);
    // Continuous reference for the comparison away from the centre.
    let analytic = |x: f64, y: f64| {
        let r2 = x * x + y * y;
        let s2 = sigma * sigma;
        (r2 - 2.0 * s2) / (s2 * s2) * (-r2 / (2.0 * s2)).exp() / (2.0 * PI * s2)
    };
    let mut worst_continuous: f64 = 0.0;
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as i64 - c as i64, y as i64 - c as i64);
            let discrete = g2(dx + 1, dy) + g2(dx - 1, dy) + g2(dx, dy + 1) + g2(dx, dy - 1) - 4.0 * g2(dx, dy);
            assert!((out.get(x, y) - discrete).abs() < 1e-4);
            assert!((out.get(x, y) - discrete).abs() < 1e-12);
            worst_continuous = worst_continuous.max((out.get(x, y) - analytic(dx as f64, dy as f64)).abs());
        }
    }
    // Loose: the sampled Laplacian carries O(h^2) error against the continuum.
    assert!(worst_continuous < 2e-3, "{worst_continuous}");
}

#[test]
fn canny_examples() {
    let flat = ImagePlane::filled(16, 16, 0.5).unwrap();
    assert!(canny(&flat, 1.0, 0.1, 0.3).unwrap().values().iter().all(|&v| v == 0.0));
    assert!(canny(&flat, 1.0, 0.3, 0.1).is_err());
    assert!(canny(&flat, 1.0, 0.0, 0.3).is_err());

    let step = plane(32, 24, |x, _| if x >= 16 { 1.0 } else { 0.0 });
    let e = canny(&step, 1.0, 0.1, 0.3).unwrap();
    for y in 2..22 {
        let cols: Vec<usize> = (0..32).filter(|&x| e.get(x, y) > 0.0).collect();
        assert_eq!(cols.len(), 1, "row {y}: {cols:?}");
        assert!((15..=16).contains(&cols[0]));
    }

    let disk = plane(64, 64, |x, y| {
        let (dx, dy) = (x as f64 - 31.5, y as f64 - 31.5);
        if dx.hypot(dy) <= 20.0 {
            1.0
        } else {
            0.0
        }
    });
    let e = canny(&disk, 1.0, 0.1, 0.3).unwrap();
    // Quantized suppression leaves a 4-connected staircase ring, whose
    // digital length is 8r rather than the Euclidean 2 pi r.
    let count = e.values().iter().filter(|&&v| v > 0.0).count() as f64;
    let target = 8.0 * 20.0;
    assert!((count - target).abs() <= 0.15 * target, "{count} edge pixels");
    assert!(count > 2.0 * PI * 20.0 * 0.85);
    assert_ring_closed(&e);
}

/// The edge set is one 8-connected component that separates the centre from the corner.
fn assert_ring_closed(e: &Field) {
    let (w, h) = (e.width(), e.height());
    let mut seen = vec![false; w * h];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        let (x, y) = (i % w, i / w);
        let nbrs = [
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
            (y > 0).then(|| i - w),
            (y + 1 < h).then(|| i + w),
        ];
        for j in nbrs.into_iter().flatten() {
            if !seen[j] && e.values()[j] == 0.0 {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    assert!(!seen[(h / 2) * w + w / 2], "background leaks into the disk");
}

#[test]
fn canny_edges_lie_on_sobel_support() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let (cx, cy, rad) = (r.random_range(20.0..44.0), r.random_range(20.0..44.0), r.random_range(6.0..16.0));
        let img = plane(64, 64, |x, y| {
            let inside = (x as f64 - cx).hypot(y as f64 - cy) < rad;
            let base = if inside { 0.8 } else { 0.2 };
            base + if x > 40 { 0.1 } else { 0.0 }
        });
        let e = canny(&img, 1.0, 0.1, 0.3).unwrap();
        let s = sobel(&img);
        for (ev, sv) in e.values().iter().zip(s.values()) {
            if *ev > 0.0 {
                assert!(*sv > 0.0);
            }
        }
    }
}

fn two_tone(w: usize, h: usize) -> ImageRGB {
    let mut px = Vec::new();
    for _y in 0..h {
        for x in 0..w {
            px.extend(if x < w / 2 { [20, 30, 200] } else { [230, 220, 40] });
        }
    }
    ImageRGB::new(w, h, px).unwrap()
}

#[test]
fn segment_examples() {
    let img = two_tone(24, 16);
    let s = segment(&img, 2, 0).unwrap();
    let left = s.get(0, 0);
    for y in 0..16 {
        for x in 0..24 {
            assert_eq!(s.get(x, y) == left, x < 12);
        }
    }
    let one = segment(&img, 1, 0).unwrap();
    assert!(one.labels().iter().all(|&l| l == 0));
    assert!(segment(&img, 0, 0).is_err());
    assert!(segment(&img, 20, 0).is_err());
    assert_eq!(segment(&img, 5, 3).unwrap(), segment(&img, 5, 3).unwrap());
}

#[test]
fn segment_recovers_color_clusters() {
    let mut r = rng(21);
    let colors = [[200.0, 40.0, 40.0], [40.0, 200.0, 40.0], [40.0, 40.0, 200.0]];
    let (w, h) = (48, 48);
    let mut truth = Vec::new();
    let mut px = Vec::new();
    for y in 0..h {
        for x in 0..w {
            // Three vertical bands with heavy per-pixel color noise.
            let c = (x * 3) / w + if y > 40 && x > 44 { 0 } else { 0 };
            truth.push(c);
            for ch in 0..3 {
                let v: f64 = colors[c][ch] + r.random_range(-30.0..30.0);
                px.push(v.clamp(0.0, 255.0) as u8);
            }
        }
    }
    let img = ImageRGB::new(w, h, px).unwrap();
    let s = segment(&img, 3, 1).unwrap();
    let mut best_total = 0;
    for c in 0..3 {
        let mut counts = [0usize; 3];
        for (l, &t) in s.labels().iter().zip(&truth) {
            if t == c {
                counts[*l as usize] += 1;
            }
        }
        best_total += counts.iter().max().unwrap();
    }
    let purity = best_total as f64 / (w * h) as f64;
    assert!(purity >= 0.95, "{purity}");
}

#[test]
fn alignment_on_coincident_boundaries_is_one() {
    let img = plane(24, 16, |x, _| if x >= 12 { 1.0 } else { 0.0 });
    let labels = (0..24 * 16).map(|i| if i % 24 >= 12 { 1 } else { 0 }).collect();
    let seg = SegmentMap::new(24, 16, 2, labels).unwrap();
    let b = boundary_plane(&seg);
    let a = alignment_plane(&sobel(&img), &b).unwrap();
    assert_eq!(b.values().iter().filter(|&&v| v > 0.0).count(), 32);
    assert!((mean_alignment(&a, &b).unwrap() - 1.0).abs() < 1e-15);

    let single = SegmentMap::new(24, 16, 1, vec![0; 24 * 16]).unwrap();
    let b = boundary_plane(&single);
    let a = alignment_plane(&sobel(&img), &b).unwrap();
    assert!(b.values().iter().all(|&v| v == 0.0));
    assert!(a.values().iter().all(|&v| v == 0.0));
    assert!(mean_alignment(&a, &b).is_none());
}

#[test]
fn blurred_splice_edge_reduces_alignment() {
    let (w, h) = (48, 48);
    let inside = |x: usize, y: usize| (16..32).contains(&x) && (16..32).contains(&y);
    let sharp = plane(w, h, |x, y| if inside(x, y) { 0.8 } else { 0.3 });
    let blurred = gaussian_blur_plane(&sharp, 3.0).unwrap();
    let labels = (0..w * h).map(|i| inside(i % w, i / w) as u8).collect();
    let seg = SegmentMap::new(w, h, 2, labels).unwrap();
    let b = boundary_plane(&seg);
    let a_sharp = mean_alignment(&alignment_plane(&sobel(&sharp), &b).unwrap(), &b).unwrap();
    let a_blur = mean_alignment(&alignment_plane(&sobel(&blurred), &b).unwrap(), &b).unwrap();
    assert!(a_blur < a_sharp, "{a_blur} vs {a_sharp}");
}

#[test]
fn mid_graph_route_matches_direct_planes() {
    let img = noise_rgb(20, 16, 30);
    let seg = segment(&img, 4, 0).unwrap();
    let feats = MidFeatures::extract(&img, &seg).unwrap();
    let mut g = Graph::new();
    let x = g.constant(image_tensor(&img));
    let v = feats.bind_graph(&mut g, x).unwrap();
    assert!(g.value(v).max_abs_diff(&feats.to_tensor()) < 1e-12);
    let c = feats.edges.canny.values();
    assert!(c.iter().all(|&v| v == 0.0 || v == 1.0));
    assert!(feats.edges.sobel.values().iter().all(|&v| v >= 0.0));
}

#[test]
fn mid_branch_shapes_and_gradients() {
    let mut store = ParamStore::new();
    let branch = MidBranch::new(&mut store, &mut rng(5), 256);
    let img = noise_rgb(64, 64, 6);
    let seg = segment(&img, SEG_K, 0).unwrap();
    let feats = MidFeatures::extract(&img, &seg).unwrap();
    let mut g = Graph::new();
    let mut p = Binder::new(&store, false);
    let v = feats.bind(&mut g);
    let t = branch.forward(&mut g, &mut p, v, 8).unwrap();
    assert_eq!(g.shape(t), &[64, 256]);

    let mut store = ParamStore::new();
    let branch = MidBranch::new(&mut store, &mut rng(5), 6);
    let img = noise_rgb(16, 16, 7);
    let seg = segment(&img, 3, 0).unwrap();
    let feats = MidFeatures::extract(&img, &seg).unwrap();
    let t = feats.to_tensor();
    branch.fit_norms(&mut store, &[&t]);
    let (err, name) = param_grad_check(
        &store,
        |g, p| -> Result<_> {
            let v = feats.bind(g);
            let t = branch.forward(g, p, v, 2)?;
            Ok(projection_loss(g, t, 3)?)
        },
        8,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{name}: {err}");
}

fn blob_scene(dark: bool) -> (ImageRGB, (f64, f64)) {
    let (w, h) = (64, 64);
    let (cx, cy) = (40.0, 22.0);
    let mut px = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let inside = (x as f64 - cx).hypot(y as f64 - cy) <= 6.0;
            let v: [u8; 3] = match (inside, dark) {
                (true, true) => [22, 22, 20],
                (true, false) => [255, 255, 250],
                _ => [130, 128, 120],
            };
            px.extend(v);
        }
    }
    (ImageRGB::new(w, h, px).unwrap(), (cx, cy))
}

#[test]
fn shadow_detection_examples() {
    let lit = ImageRGB::filled(32, 32, [120, 90, 60]).unwrap();
    assert!(detect_shadows(&lit).regions.is_empty());

    let (img, (cx, cy)) = blob_scene(true);
    let d = detect_shadows(&img);
    assert_eq!(d.regions.len(), 1);
    let (x, y) = d.regions[0].centroid;
    assert!((x - cx).hypot(y - cy) <= 2.0);

    let (bright, _) = blob_scene(false);
    assert!(detect_shadows(&bright).regions.is_empty());
}

#[test]
fn shadow_consistency_examples() {
    let light = [0.6, -0.8];
    let at = |d: (f64, f64)| RegionPair {
        object_centroid: (30.0, 30.0),
        shadow_centroid: (30.0 + d.0, 30.0 + d.1),
        object_id: 1,
        shadow_id: 0,
    };
    let s = shadow_consistency(&[at((-6.0, 8.0))], light).unwrap();
    assert!((s.aggregate - 1.0).abs() < 1e-12);
    let s = shadow_consistency(&[at((6.0, -8.0))], light).unwrap();
    assert!((s.aggregate + 1.0).abs() < 1e-12);
    let s = shadow_consistency(&[at((8.0, 6.0))], light).unwrap();
    assert!(s.aggregate.abs() < 1e-12);
    assert_eq!(shadow_consistency(&[], light).unwrap().aggregate, 1.0);
    let s = shadow_consistency(&[at((0.0, 0.0))], light).unwrap();
    assert!(s.per_pair.is_empty());
    assert!(shadow_consistency(&[], [0.0, 0.0]).is_err());
}

#[test]
fn light_direction_points_at_the_bright_spot() {
    let img = gray_rgb(40, 40, |x, y| if x >= 34 && y <= 5 { 255 } else { 90 });
    let l = estimate_light_dir(&img).unwrap();
    assert!(l[0] > 0.5 && l[1] < -0.5);
    assert!(((l[0] * l[0] + l[1] * l[1]) - 1.0).abs() < 1e-12);
}

#[test]
fn pairing_finds_the_casting_object() {
    let (img, _) = blob_scene(true);
    let seg = segment(&img, 2, 0).unwrap();
    let d = detect_shadows(&img);
    let pairs = pair_shadows(&d, &seg).unwrap();
    assert_eq!(pairs.len(), 1);
    let p = &pairs[0];
    assert!(p.object_centroid.0 >= 0.0 && p.object_centroid.0 < 64.0);
    assert!(p.object_centroid.1 >= 0.0 && p.object_centroid.1 < 64.0);
}

#[test]
fn reflection_examples() {
    let p = noise_plane(16, 12, 40);
    let mirrored = plane(16, 12, |x, y| if y < 6 { p.get(x, y) } else { p.get(x, 11 - y) });
    assert_eq!(reflection_symmetry(&mirrored, 6).unwrap(), 1.0);
    assert_eq!(reflection_symmetry(&ImagePlane::filled(8, 8, 0.3).unwrap(), 4).unwrap(), 0.0);
    assert!(reflection_symmetry(&p, 0).is_err());
    assert!(reflection_symmetry(&p, 12).is_err());

    let mut hits = 0;
    for seed in 0..20 {
        let s = reflection_symmetry(&noise_plane(64, 64, 100 + seed), 32).unwrap();
        if s.abs() < 0.1 {
            hits += 1;
        }
    }
    assert!(hits >= 19);
}

#[test]
fn pseudo_depth_examples() {
    let flat = ImageRGB::filled(16, 16, [9, 9, 9]).unwrap();
    assert!(pseudo_depth(&flat).field().values().iter().all(|&v| v == 0.5));

    let ramp = gray_rgb(16, 32, |_, y| (8 * y) as u8);
    let z = pseudo_depth(&ramp);
    for y in 1..32 {
        assert!(z.field().get(5, y) >= z.field().get(5, y - 1));
    }
    assert!(z.field().get(5, 31) > z.field().get(5, 0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.pgm");
    let vals: Vec<f64> = (0..64).map(|i| (i * 4) as f64 / 255.0).collect();
    crate::image::save_plane(&ImagePlane::new(8, 8, vals.clone()).unwrap(), &path).unwrap();
    let ext = DepthMap::from_pgm(&path).unwrap();
    for (a, b) in ext.field().values().iter().zip(&vals) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn depth_coherence_examples() {
    let flat = Field::new(7, 5, vec![0.4; 35]).unwrap();
    assert_eq!(depth_coherence(&flat, 0.0).unwrap(), 0.0);
    assert_eq!(depth_coherence(&flat, 1.0).unwrap(), 0.0);
    assert!(depth_coherence(&flat, -0.1).is_err());

    let (w, h) = (10, 6);
    let step = Field::from_fn(w, h, |x, _| if x >= 4 { 1.0 } else { 0.0 });
    let s = depth_coherence(&step, 0.0).unwrap();
    assert!((s + 1.0 / (w as f64 - 1.0)).abs() < 1e-15);

    let scene = noise_rgb(32, 32, 50);
    let z = pseudo_depth(&scene).field().clone();
    let mut pasted = z.clone().into_values();
    for y in 8..16 {
        for x in 8..16 {
            pasted[y * 32 + x] = (z.get(x + 14, y + 12) + 0.3).min(1.0);
        }
    }
    let pasted = Field::new(32, 32, pasted).unwrap();
    assert!(depth_coherence(&pasted, 0.0).unwrap() < depth_coherence(&z, 0.0).unwrap());
}

#[test]
fn high_branch_shapes_and_gradients() {
    let mut store = ParamStore::new();
    let branch = HighBranch::new(&mut store, &mut rng(8), 256);
    let (img, _) = blob_scene(true);
    let seg = segment(&img, 4, 0).unwrap();
    let feats = HighFeatures::extract(&img, &seg, &HighOptions::default()).unwrap();
    let mut g = Graph::new();
    let mut p = Binder::new(&store, false);
    let v = feats.bind(&mut g);
    let t = branch.forward(&mut g, &mut p, v, 8).unwrap();
    assert_eq!(g.shape(t), &[64, 256]);
    assert!(g.value(t).all_finite());

    // Zeroed projection gives zero tokens.
    let mut zeroed = store.clone();
    for id in [branch.proj.w, branch.proj.b.unwrap()] {
        zeroed.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut p = Binder::new(&zeroed, false);
    let v = feats.bind(&mut g);
    let t = branch.forward(&mut g, &mut p, v, 8).unwrap();
    assert!(g.value(t).data().iter().all(|&v| v == 0.0));

    let mut store = ParamStore::new();
    let branch = HighBranch::new(&mut store, &mut rng(8), 6);
    let small = noise_rgb(16, 16, 9);
    let seg = segment(&small, 3, 0).unwrap();
    let feats = HighFeatures::extract(&small, &seg, &HighOptions::default()).unwrap();
    let (err, name) = param_grad_check(
        &store,
        |g, p| -> Result<_> {
            let v = feats.bind(g);
            let t = branch.forward(g, p, v, 2)?;
            Ok(projection_loss(g, t, 4)?)
        },
        8,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{name}: {err}");
}

#[test]
fn heuristics_are_deterministic() {
    let (img, _) = blob_scene(true);
    let seg = segment(&img, 4, 0).unwrap();
    let a = HighFeatures::extract(&img, &seg, &HighOptions::default()).unwrap();
    let b = HighFeatures::extract(&img, &seg, &HighOptions::default()).unwrap();
    assert_eq!(a.to_tensor(), b.to_tensor());
}
