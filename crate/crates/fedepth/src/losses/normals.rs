//! Surface-normal and ordinal-ranking losses against a frozen depth prior.
//!
//! Normals come from central differences of back-projected 3D points, so
//! they live on the interior `(h-2) x (w-2)` grid. A pixel whose difference
//! vectors are near-parallel (cross-product norm below `DEGENERATE_NORM`)
//! is skipped rather than normalized.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::camera::{DepthMap, ImageFrame, Intrinsics};
use crate::error::Result;
use crate::real::Real;

/// Cross products shorter than this give no usable normal.
pub const DEGENERATE_NORM: f64 = 1e-8;
/// Confidence threshold: a ranking pair needs a pseudo-depth ratio of at
/// least `1 + RANKING_TAU`.
pub const RANKING_TAU: f64 = 0.1;
/// Hinge margin of the ranking loss.
pub const RANKING_MARGIN: f64 = 0.0;
/// Candidate pixel pairs drawn per sample for the ranking loss.
pub const RANKING_CANDIDATES: usize = 64;
/// Image-gradient quantile above which a pixel counts as an edge.
pub const EDGE_QUANTILE: f64 = 0.9;
/// Distance to the across-edge partner pixel.
pub const EDGE_PAIR_DISTANCE: usize = 2;
/// Edge pairs are subsampled to this many per image.
pub const EDGE_MAX_PAIRS: usize = 128;

/// Unit surface normals of a depth field, on the interior grid.
pub struct NormalField<'t, F: Real> {
    /// `[h-2, w-2]` unit components; zero where `valid` is false.
    pub nx: Var<'t, F>,
    pub ny: Var<'t, F>,
    pub nz: Var<'t, F>,
    pub valid: Array2<bool>,
}

impl<'t, F: Real> NormalField<'t, F> {
    /// Normal of interior pixel `(r, c)` of the full image; `None` when
    /// degenerate. Rows/cols are full-image coordinates.
    pub fn at(&self, r: usize, c: usize) -> Option<[F; 3]> {
        let (ir, ic) = (r - 1, c - 1);
        if !self.valid[[ir, ic]] {
            return None;
        }
        Some([
            self.nx.value()[[ir, ic]],
            self.ny.value()[[ir, ic]],
            self.nz.value()[[ir, ic]],
        ])
    }
}

/// Differentiable unit normals from central differences of back-projected
/// points. `depth` is `[h, w]`.
pub fn unit_normals_on_tape<'t, F: Real>(
    depth: Var<'t, F>,
    k: &Intrinsics<F>,
) -> NormalField<'t, F> {
    let tape = depth.tape();
    let (h, w) = (k.height, k.width);
    assert_eq!(depth.dims(), vec![h, w], "depth shape vs intrinsics");

    let x0 = tape.constant(k.normalized_x().into_dyn());
    let y0 = tape.constant(k.normalized_y().into_dyn());
    let px = depth * x0;
    let py = depth * y0;
    let pz = depth;

    // Central differences on the interior: du spans columns, dv spans rows.
    let du = |p: Var<'t, F>| {
        p.slice_ranges(&[(1, h - 1), (2, w)]) - p.slice_ranges(&[(1, h - 1), (0, w - 2)])
    };
    let dv = |p: Var<'t, F>| {
        p.slice_ranges(&[(2, h), (1, w - 1)]) - p.slice_ranges(&[(0, h - 2), (1, w - 1)])
    };
    let (ax, ay, az) = (du(px), du(py), du(pz));
    let (bx, by, bz) = (dv(px), dv(py), dv(pz));

    let cx = ay * bz - az * by;
    let cy = az * bx - ax * bz;
    let cz = ax * by - ay * bx;
    let norm2 = cx * cx + cy * cy + cz * cz;

    let floor = F::c(DEGENERATE_NORM * DEGENERATE_NORM);
    let n2v = norm2.value();
    let valid = Array2::from_shape_fn((h - 2, w - 2), |(r, c)| n2v[[r, c]] >= floor);
    let m = tape.constant(super::indicator::<F>(&valid).into_dyn());
    let fill = tape.constant(
        Array2::from_shape_fn((h - 2, w - 2), |(r, c)| {
            if valid[[r, c]] {
                F::zero()
            } else {
                F::one()
            }
        })
        .into_dyn(),
    );
    // Degenerate lanes divide by one and are zeroed by the mask, keeping
    // both values and gradients finite.
    let norm = (norm2 * m + fill).sqrt();
    NormalField {
        nx: cx * m / norm,
        ny: cy * m / norm,
        nz: cz * m / norm,
        valid,
    }
}

/// Mean L1 distance between the unit normals of `depth` and a frozen prior,
/// over pixels where both fields are well-defined. No usable pixel → 0.
pub fn normal_matching_loss_on_tape<'t, F: Real>(
    depth: Var<'t, F>,
    pseudo: &Array2<F>,
    k: &Intrinsics<F>,
) -> Var<'t, F> {
    let tape = depth.tape();
    let pred = unit_normals_on_tape(depth, k);
    let prior = unit_normals_on_tape(tape.constant(pseudo.clone().into_dyn()), k);
    let both = Array2::from_shape_fn(pred.valid.dim(), |idx| {
        pred.valid[idx] && prior.valid[idx]
    });
    let n = both.iter().filter(|&&b| b).count();
    if n == 0 {
        log::warn!("normal matching found no well-defined pixel; contributing 0");
        return tape.scalar(F::zero());
    }
    let m = tape.constant(super::indicator::<F>(&both).into_dyn());
    let l1 = (pred.nx - prior.nx).abs() + (pred.ny - prior.ny).abs()
        + (pred.nz - prior.nz).abs();
    (l1 * m).sum_all().scale(F::c(1.0 / n as f64))
}

/// Mean L1 distance between unit normal fields of two depth maps.
pub fn normal_matching_loss<F: Real>(
    depth: &DepthMap<F>,
    pseudo: &DepthMap<F>,
    k: &Intrinsics<F>,
) -> Result<F> {
    let tape: Tape<F> = Tape::new();
    let d = tape.constant(depth.data().clone().into_dyn());
    Ok(normal_matching_loss_on_tape(d, pseudo.data(), k).scalar_value())
}

/// An ordinal depth pair: the prior is confident that `farther` lies deeper
/// than `nearer`. Coordinates are flattened `r * width + c` indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankedPair {
    pub farther: usize,
    pub nearer: usize,
}

/// Draws random pixel pairs and keeps those whose pseudo-depth ratio clears
/// the confidence threshold `1 + tau`.
pub fn sample_confident_pairs<F: Real>(
    pseudo: &Array2<F>,
    tau: f64,
    candidates: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<RankedPair> {
    let n = pseudo.len();
    let flat: Vec<F> = pseudo.iter().copied().collect();
    let ratio = F::c(1.0 + tau);
    let mut out = Vec::new();
    for _ in 0..candidates {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if flat[i] > flat[j] * ratio {
            out.push(RankedPair {
                farther: i,
                nearer: j,
            });
        } else if flat[j] > flat[i] * ratio {
            out.push(RankedPair {
                farther: j,
                nearer: i,
            });
        }
    }
    out
}

/// Hinge penalty on predicted depth pairs that contradict the prior's
/// confident ordering: mean of `max(0, d[nearer] - d[farther] + margin)`.
pub fn ranking_loss_on_tape<'t, F: Real>(
    depth: Var<'t, F>,
    pairs: &[RankedPair],
    margin: f64,
) -> Var<'t, F> {
    let tape = depth.tape();
    if pairs.is_empty() {
        log::warn!("no confident ranking pairs; contributing 0");
        return tape.scalar(F::zero());
    }
    let w = depth.dims()[1];
    let to_rc = |flat: usize| (flat / w, flat % w);
    let farther: Vec<(usize, usize)> = pairs.iter().map(|p| to_rc(p.farther)).collect();
    let nearer: Vec<(usize, usize)> = pairs.iter().map(|p| to_rc(p.nearer)).collect();
    let df = depth.gather_hw(&farther);
    let dn = depth.gather_hw(&nearer);
    (dn - df).offset(F::c(margin)).relu().mean_all()
}

/// Ranking loss of a predicted depth map against prior-confident pairs.
pub fn confident_depth_ranking_loss<F: Real>(
    depth: &DepthMap<F>,
    pairs: &[RankedPair],
    margin: f64,
) -> F {
    let tape: Tape<F> = Tape::new();
    let d = tape.constant(depth.data().clone().into_dyn());
    ranking_loss_on_tape(d, pairs, margin).scalar_value()
}

/// Pixel pairs straddling strong image edges: each edge pixel (gradient
/// magnitude at or above the `EDGE_QUANTILE` quantile) is paired with its
/// neighbor `EDGE_PAIR_DISTANCE` away along the dominant gradient axis.
/// Both pixels lie on the interior grid so normals exist for them.
pub fn edge_pairs<F: Real>(
    image: &ImageFrame<F>,
    max_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<((usize, usize), (usize, usize))> {
    edge_pairs_from_gray(&image.gray(), max_pairs, rng)
}

/// `edge_pairs` on an already-reduced grayscale image.
pub fn edge_pairs_from_gray<F: Real>(
    gray: &Array2<F>,
    max_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<((usize, usize), (usize, usize))> {
    let (h, w) = gray.dim();
    if h < 3 || w < 3 {
        return Vec::new();
    }
    let mut gx = Array2::<F>::zeros((h, w));
    let mut gy = Array2::<F>::zeros((h, w));
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            gx[[r, c]] = (gray[[r, c + 1]] - gray[[r, c - 1]]) * F::c(0.5);
            gy[[r, c]] = (gray[[r + 1, c]] - gray[[r - 1, c]]) * F::c(0.5);
        }
    }
    let mut mags: Vec<F> = Vec::with_capacity((h - 2) * (w - 2));
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            mags.push((gx[[r, c]] * gx[[r, c]] + gy[[r, c]] * gy[[r, c]]).sqrt());
        }
    }
    let mut sorted = mags.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite magnitudes"));
    let thr = sorted[((sorted.len() - 1) as f64 * EDGE_QUANTILE).floor() as usize];

    let d = EDGE_PAIR_DISTANCE;
    let interior = |r: usize, c: usize| r >= 1 && r < h - 1 && c >= 1 && c < w - 1;
    let mut pairs = Vec::new();
    let mut i = 0usize;
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let mag = mags[i];
            i += 1;
            if mag < thr || mag == F::zero() {
                continue;
            }
            let horizontal = gx[[r, c]].abs() >= gy[[r, c]].abs();
            let partner = if horizontal {
                if interior(r, c + d) {
                    Some((r, c + d))
                } else if c >= d && interior(r, c - d) {
                    Some((r, c - d))
                } else {
                    None
                }
            } else if interior(r + d, c) {
                Some((r + d, c))
            } else if r >= d && interior(r - d, c) {
                Some((r - d, c))
            } else {
                None
            };
            if let Some(p) = partner {
                pairs.push(((r, c), p));
            }
        }
    }
    if pairs.len() > max_pairs {
        pairs.shuffle(rng);
        pairs.truncate(max_pairs);
        pairs.sort();
    }
    pairs
}

/// Relative-normal loss across edge pairs: for each pair the angle between
/// its two normals should match between prediction and prior; the loss is
/// the mean absolute difference of the angle cosines.
pub fn relative_normal_loss_on_tape<'t, F: Real>(
    depth: Var<'t, F>,
    pseudo: &Array2<F>,
    pairs: &[((usize, usize), (usize, usize))],
    k: &Intrinsics<F>,
) -> Var<'t, F> {
    let tape = depth.tape();
    let pred = unit_normals_on_tape(depth, k);
    let prior = unit_normals_on_tape(tape.constant(pseudo.clone().into_dyn()), k);

    // Keep pairs whose four normals all exist.
    let ok = |f: &NormalField<'t, F>, (r, c): (usize, usize)| f.valid[[r - 1, c - 1]];
    let usable: Vec<_> = pairs
        .iter()
        .copied()
        .filter(|&(p, q)| ok(&pred, p) && ok(&pred, q) && ok(&prior, p) && ok(&prior, q))
        .collect();
    if usable.is_empty() {
        log::warn!("no usable edge pairs for the relative-normal loss; contributing 0");
        return tape.scalar(F::zero());
    }
    let first: Vec<(usize, usize)> = usable.iter().map(|&(p, _)| (p.0 - 1, p.1 - 1)).collect();
    let second: Vec<(usize, usize)> = usable.iter().map(|&(_, q)| (q.0 - 1, q.1 - 1)).collect();

    let cos_of = |f: &NormalField<'t, F>| {
        f.nx.gather_hw(&first) * f.nx.gather_hw(&second)
            + f.ny.gather_hw(&first) * f.ny.gather_hw(&second)
            + f.nz.gather_hw(&first) * f.nz.gather_hw(&second)
    };
    (cos_of(&pred) - cos_of(&prior)).abs().mean_all()
}

/// Relative-normal loss of a depth map against the prior on edge pairs
/// sampled from `image`.
pub fn edge_aware_relative_normal_loss<F: Real>(
    depth: &DepthMap<F>,
    pseudo: &DepthMap<F>,
    image: &ImageFrame<F>,
    k: &Intrinsics<F>,
    rng: &mut ChaCha8Rng,
) -> Result<F> {
    let pairs = edge_pairs(image, EDGE_MAX_PAIRS, rng);
    let tape: Tape<F> = Tape::new();
    let d = tape.constant(depth.data().clone().into_dyn());
    Ok(relative_normal_loss_on_tape(d, pseudo.data(), &pairs, k).scalar_value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{max_relative_error, numeric_gradient};
    use ndarray::{Array3, ArrayD};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn k8() -> Intrinsics<f64> {
        Intrinsics::new(6.0, 6.0, 3.5, 3.5, 8, 8).unwrap()
    }

    /// Scalar-loop unit normal at interior pixel (r, c), or None.
    fn normal_oracle(
        depth: &Array2<f64>,
        k: &Intrinsics<f64>,
        r: usize,
        c: usize,
    ) -> Option<[f64; 3]> {
        let point = |r: usize, c: usize| {
            let d = depth[[r, c]];
            [
                d * (c as f64 - k.cx) / k.fx,
                d * (r as f64 - k.cy) / k.fy,
                d,
            ]
        };
        let (pr, pl) = (point(r, c + 1), point(r, c - 1));
        let (pd, pu) = (point(r + 1, c), point(r - 1, c));
        let a = [pr[0] - pl[0], pr[1] - pl[1], pr[2] - pl[2]];
        let b = [pd[0] - pu[0], pd[1] - pu[1], pd[2] - pu[2]];
        let n = [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len < DEGENERATE_NORM {
            return None;
        }
        Some([n[0] / len, n[1] / len, n[2] / len])
    }

    #[test]
    fn constant_depth_normals_point_along_the_axis() {
        let k = k8();
        let tape: Tape<f64> = Tape::new();
        let d = tape.constant(Array2::from_elem((8, 8), 2.0).into_dyn());
        let f = unit_normals_on_tape(d, &k);
        assert!(f.valid.iter().all(|&v| v));
        for r in 1..7 {
            for c in 1..7 {
                let n = f.at(r, c).unwrap();
                assert!(n[0].abs() < 1e-12 && n[1].abs() < 1e-12);
                assert!((n[2] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normals_match_the_scalar_oracle() {
        let k = k8();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let depth = Array2::from_shape_fn((8, 8), |_| rng.random_range(1.0..5.0));
        let tape: Tape<f64> = Tape::new();
        let d = tape.constant(depth.clone().into_dyn());
        let f = unit_normals_on_tape(d, &k);
        for r in 1..7 {
            for c in 1..7 {
                match (f.at(r, c), normal_oracle(&depth, &k, r, c)) {
                    (Some(got), Some(want)) => {
                        for i in 0..3 {
                            assert!((got[i] - want[i]).abs() < 1e-9);
                        }
                    }
                    (None, None) => {}
                    (g, w) => panic!("validity disagrees at ({r},{c}): {g:?} vs {w:?}"),
                }
            }
        }
    }

    #[test]
    fn identical_depths_have_zero_normal_loss() {
        let k = k8();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let d =
            DepthMap::new(Array2::from_shape_fn((8, 8), |_| rng.random_range(1.0..5.0))).unwrap();
        let loss = normal_matching_loss(&d, &d, &k).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn tilted_plane_against_flat_plane_matches_the_analytic_normal_gap() {
        // Depth field of the world plane z = 1 + 0.1 x: back-projected
        // points satisfy z = 1 / (1 - 0.1 (u - cx) / fx), so its true unit
        // normal is (-0.1, 0, 1)/sqrt(1.01) while a constant-depth field
        // has normal (0, 0, 1).
        let k = k8();
        let tilted = DepthMap::new(Array2::from_shape_fn((8, 8), |(_, c)| {
            1.0 / (1.0 - 0.1 * (c as f64 - k.cx) / k.fx)
        }))
        .unwrap();
        let flat = DepthMap::new(Array2::from_elem((8, 8), 1.0)).unwrap();
        let got = normal_matching_loss(&tilted, &flat, &k).unwrap();
        let s = 1.01f64.sqrt();
        let want = (0.1 / s).abs() + (1.0 / s - 1.0).abs();
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }

    #[test]
    fn normal_loss_is_invariant_under_uniform_depth_scaling() {
        let k = k8();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let base = Array2::from_shape_fn((8, 8), |_| rng.random_range(1.0..5.0));
        let pseudo =
            DepthMap::new(Array2::from_shape_fn((8, 8), |_| rng.random_range(1.0..5.0))).unwrap();
        let a = normal_matching_loss(&DepthMap::new(base.clone()).unwrap(), &pseudo, &k).unwrap();
        let b =
            normal_matching_loss(&DepthMap::new(base.mapv(|v| v * 3.0)).unwrap(), &pseudo, &k)
                .unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn confident_pairs_respect_the_ratio_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let pseudo = Array2::from_shape_fn((8, 8), |_| rng.random_range(1.0..10.0f64));
        let pairs = sample_confident_pairs(&pseudo, RANKING_TAU, 200, &mut rng);
        assert!(!pairs.is_empty());
        let flat: Vec<f64> = pseudo.iter().copied().collect();
        for p in &pairs {
            assert!(flat[p.farther] > flat[p.nearer] * (1.0 + RANKING_TAU));
        }
        // Deterministic under the same seed.
        let mut rng1 = ChaCha8Rng::seed_from_u64(77);
        let mut rng2 = ChaCha8Rng::seed_from_u64(77);
        assert_eq!(
            sample_confident_pairs(&pseudo, RANKING_TAU, 50, &mut rng1),
            sample_confident_pairs(&pseudo, RANKING_TAU, 50, &mut rng2)
        );
    }

    #[test]
    fn ranking_hinge_arithmetic() {
        // Prediction agrees with the prior: hinge inactive.
        let agree = DepthMap::new(Array2::from_shape_fn((2, 2), |(r, c)| {
            1.0 + (r * 2 + c) as f64
        }))
        .unwrap();
        let pairs = [RankedPair {
            farther: 3,
            nearer: 0,
        }];
        assert_eq!(confident_depth_ranking_loss(&agree, &pairs, 0.0), 0.0);

        // Single inverted pair with depths 1 and 2 costs exactly 1.
        let mut inv = Array2::from_elem((2, 2), 5.0);
        inv[[0, 0]] = 2.0; // nearer by the prior, but predicted deeper
        inv[[1, 1]] = 1.0;
        let inverted = DepthMap::new(inv).unwrap();
        let got: f64 = confident_depth_ranking_loss(&inverted, &pairs, 0.0);
        assert!((got - 1.0).abs() < 1e-12);

        assert_eq!(confident_depth_ranking_loss(&agree, &[], 0.0), 0.0);
    }

    #[test]
    fn ranking_loss_matches_a_scalar_hinge_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let depth =
            DepthMap::new(Array2::from_shape_fn((8, 8), |_| rng.random_range(1.0..10.0))).unwrap();
        let pseudo = Array2::from_shape_fn((8, 8), |_| rng.random_range(1.0..10.0));
        let pairs = sample_confident_pairs(&pseudo, RANKING_TAU, 100, &mut rng);
        let got = confident_depth_ranking_loss(&depth, &pairs, RANKING_MARGIN);
        let flat: Vec<f64> = depth.data().iter().copied().collect();
        let want = pairs
            .iter()
            .map(|p| (flat[p.nearer] - flat[p.farther]).max(0.0))
            .sum::<f64>()
            / pairs.len() as f64;
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn edge_pairs_straddle_the_strongest_gradients() {
        // Vertical brightness step in the middle of the image.
        let img = ImageFrame::new(Array3::from_shape_fn((8, 8, 3), |(_, c, _)| {
            if c < 4 {
                0.1
            } else {
                0.9
            }
        }))
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let pairs = edge_pairs(&img, EDGE_MAX_PAIRS, &mut rng);
        assert!(!pairs.is_empty());
        for ((r, c), (r2, c2)) in &pairs {
            assert_eq!(r, r2, "step is vertical, partners lie horizontally");
            assert_eq!(c.abs_diff(*c2), EDGE_PAIR_DISTANCE);
            assert!(*c == 3 || *c == 4, "edge sits at the step, got col {c}");
        }

        // A flat image has no gradient anywhere, hence no pairs.
        let flat = ImageFrame::new(Array3::from_elem((8, 8, 3), 0.5)).unwrap();
        assert!(edge_pairs(&flat, EDGE_MAX_PAIRS, &mut rng).is_empty());
    }

    #[test]
    fn relative_normal_loss_is_zero_for_identical_and_constant_fields() {
        let k = k8();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let img = ImageFrame::new(Array3::from_shape_fn((8, 8, 3), |_| {
            rng.random_range(0.0..1.0)
        }))
        .unwrap();
        let d =
            DepthMap::new(Array2::from_shape_fn((8, 8), |_| rng.random_range(1.0..5.0))).unwrap();
        let same = edge_aware_relative_normal_loss(&d, &d, &img, &k, &mut rng).unwrap();
        assert!(same.abs() < 1e-12);

        // Two different constant depth fields: all normals are parallel,
        // both cosines are 1, loss 0.
        let c1 = DepthMap::new(Array2::from_elem((8, 8), 2.0)).unwrap();
        let c2 = DepthMap::new(Array2::from_elem((8, 8), 5.0)).unwrap();
        let flat = edge_aware_relative_normal_loss(&c1, &c2, &img, &k, &mut rng).unwrap();
        assert!(flat.abs() < 1e-9);
    }

    #[test]
    fn relative_normal_loss_matches_a_scalar_pair_loop() {
        let k = k8();
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let img = ImageFrame::new(Array3::from_shape_fn((8, 8, 3), |_| {
            rng.random_range(0.0..1.0)
        }))
        .unwrap();
        let depth = Array2::from_shape_fn((8, 8), |_| rng.random_range(1.0..5.0));
        let pseudo = Array2::from_shape_fn((8, 8), |_| rng.random_range(1.0..5.0));
        let pairs = edge_pairs(&img, EDGE_MAX_PAIRS, &mut rng);
        assert!(!pairs.is_empty());

        let tape: Tape<f64> = Tape::new();
        let d = tape.constant(depth.clone().into_dyn());
        let got = relative_normal_loss_on_tape(d, &pseudo, &pairs, &k).scalar_value();

        let mut sum = 0.0;
        let mut n = 0usize;
        for &(p, q) in &pairs {
            let quad = [
                normal_oracle(&depth, &k, p.0, p.1),
                normal_oracle(&depth, &k, q.0, q.1),
                normal_oracle(&pseudo, &k, p.0, p.1),
                normal_oracle(&pseudo, &k, q.0, q.1),
            ];
            if quad.iter().any(|n| n.is_none()) {
                continue;
            }
            let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            let cp = dot(quad[0].unwrap(), quad[1].unwrap());
            let cq = dot(quad[2].unwrap(), quad[3].unwrap());
            sum += (cp - cq).abs();
            n += 1;
        }
        assert!(n > 0);
        let want = sum / n as f64;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn pseudo_depth_loss_gradients_match_finite_differences() {
        let k = k8();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let depth0: ArrayD<f64> =
            Array2::from_shape_fn((8, 8), |_| rng.random_range(1.0..5.0)).into_dyn();
        let pseudo = Array2::from_shape_fn((8, 8), |_| rng.random_range(1.0..5.0));
        let img = ImageFrame::new(Array3::from_shape_fn((8, 8, 3), |_| {
            rng.random_range(0.0..1.0)
        }))
        .unwrap();
        let pairs = sample_confident_pairs(&pseudo, RANKING_TAU, 100, &mut rng);
        let epairs = edge_pairs(&img, EDGE_MAX_PAIRS, &mut rng);
        assert!(!pairs.is_empty() && !epairs.is_empty());

        type Build = for<'t> fn(
            Var<'t, f64>,
            &Array2<f64>,
            &[RankedPair],
            &[((usize, usize), (usize, usize))],
            &Intrinsics<f64>,
        ) -> Var<'t, f64>;
        let builders: [(&str, Build); 3] = [
            ("normal", |d, ps, _, _, k| {
                normal_matching_loss_on_tape(d, ps, k)
            }),
            ("ranking", |d, _, pr, _, _| {
                ranking_loss_on_tape(d, pr, RANKING_MARGIN)
            }),
            ("relative normal", |d, ps, _, ep, k| {
                relative_normal_loss_on_tape(d, ps, ep, k)
            }),
        ];
        for (name, build) in builders {
            let tape: Tape<f64> = Tape::new();
            let d = tape.leaf(depth0.clone());
            let loss = build(d, &pseudo, &pairs, &epairs, &k);
            let grads = tape.backward(loss);
            let fd = numeric_gradient(&depth0, 1e-6, |x| {
                let t: Tape<f64> = Tape::new();
                let d = t.leaf(x.clone());
                build(d, &pseudo, &pairs, &epairs, &k).scalar_value()
            });
            let err = max_relative_error(&grads.wrt(d), &fd, 1e-6);
            assert!(err < 1e-3, "{name}: rel err {err}");
        }
    }
}
