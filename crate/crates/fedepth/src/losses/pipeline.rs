//! The full per-sample training objective on one tape.
//!
//! One sample couples a target frame with one or more temporally adjacent
//! source frames. Every source is warped into the target view; per-pixel
//! photometric errors take their minimum across sources, the auto-mask
//! drops pixels a source explains without any warp (stationary content),
//! and the surviving pixels drive the mask-weighted photometric and
//! geometry-consistency terms. The pseudo-depth prior adds the normal,
//! ranking, and relative-normal terms on the target frame alone.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::normals::{
    edge_pairs_from_gray, normal_matching_loss_on_tape, ranking_loss_on_tape,
    relative_normal_loss_on_tape, sample_confident_pairs, RANKING_CANDIDATES, RANKING_MARGIN,
    RANKING_TAU,
};
use super::{indicator, masked_mean, photometric_error_map, LossBreakdown, LossWeights};
use crate::autodiff::Var;
use crate::camera::{warp_on_tape, Intrinsics};
use crate::error::{Error, Result};
use crate::losses::normals::EDGE_MAX_PAIRS;
use crate::real::Real;

/// Error assigned to lanes a warp cannot reach, so the per-pixel minimum
/// never selects them.
pub const INVALID_ERROR: f64 = 1e6;

/// One source frame with its predicted depth and relative pose.
pub struct WarpSource<'t, F: Real> {
    /// `[3, h, w]` source image, a constant on the tape.
    pub image: Var<'t, F>,
    /// `[h, w]` predicted source depth.
    pub depth: Var<'t, F>,
    /// Pose 6-vector mapping target-camera points into this source camera.
    pub pose: Var<'t, F>,
}

/// Tape-resident inputs of one training sample.
pub struct SelfSupervisionSample<'t, F: Real> {
    /// `[3, h, w]` target image, a constant on the tape.
    pub target_image: Var<'t, F>,
    /// `[h, w]` predicted target depth.
    pub target_depth: Var<'t, F>,
    pub sources: Vec<WarpSource<'t, F>>,
    /// Frozen `[h, w]` depth prior for the target frame.
    pub pseudo_depth: Array2<F>,
}

/// Builds the combined objective for one sample and reports each term.
///
/// Pixels valid in no source get an empty-validity error asking the caller
/// to skip the sample. The auto-mask further excludes pixels explained
/// better by an unwarped source; when it rejects everything (common before
/// the pose estimate moves off zero) the warp-dependent terms are zero and
/// the sample still trains through the prior-anchored terms.
pub fn self_supervision_loss<'t, F: Real>(
    sample: &SelfSupervisionSample<'t, F>,
    k: &Intrinsics<F>,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<(Var<'t, F>, LossBreakdown)> {
    if sample.sources.is_empty() {
        return Err(Error::invalid("a training sample needs at least one source"));
    }
    let tape = sample.target_image.tape();
    let (h, w) = (k.height, k.width);
    let big = F::c(INVALID_ERROR);

    let mut adjusted: Vec<Var<'t, F>> = Vec::new();
    let mut inconsistency: Vec<Var<'t, F>> = Vec::new();
    let mut identity_vals: Vec<Array2<F>> = Vec::new();
    let mut union_valid = Array2::from_elem((h, w), false);

    for source in &sample.sources {
        let warp = warp_on_tape(source.image, source.depth, sample.target_depth, source.pose, k);
        let err = photometric_error_map(warp.reconstruction, sample.target_image, weights);
        let m = tape.constant(indicator::<F>(&warp.validity).into_dyn());
        let fill = tape.constant(
            warp.validity
                .mapv(|v| if v { F::zero() } else { big })
                .into_dyn(),
        );
        adjusted.push(err * m + fill);

        // Relative depth disagreement; the masked denominator keeps
        // excluded lanes at exactly zero with zero gradient.
        let den = warp.projected_depth + warp.interpolated_depth;
        let den_safe = den * m
            + tape.constant(
                warp.validity
                    .mapv(|v| if v { F::zero() } else { F::one() })
                    .into_dyn(),
            );
        inconsistency
            .push((warp.projected_depth - warp.interpolated_depth).abs() / den_safe);

        let ident = photometric_error_map(source.image, sample.target_image, weights);
        identity_vals.push(
            ident
                .value()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("error map is 2-d"),
        );
        union_valid.zip_mut_with(&warp.validity, |u, &v| *u = *u || v);
    }

    let min_err = adjusted[1..]
        .iter()
        .fold(adjusted[0], |acc, &e| acc.minimum(e));

    // Source choice and auto-mask are decided on forward values and enter
    // the graph as constants.
    let adjusted_vals: Vec<Array2<F>> = adjusted
        .iter()
        .map(|e| {
            e.value()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("error map is 2-d")
        })
        .collect();
    let automask = Array2::from_shape_fn((h, w), |idx| {
        let best_warp = adjusted_vals
            .iter()
            .map(|e| e[idx])
            .fold(F::infinity(), F::min);
        let best_ident = identity_vals
            .iter()
            .map(|e| e[idx])
            .fold(F::infinity(), F::min);
        best_warp < best_ident
    });
    if !union_valid.iter().any(|&b| b) {
        return Err(Error::EmptyValidity);
    }
    let active = Array2::from_shape_fn((h, w), |idx| union_valid[idx] && automask[idx]);

    let (l_p, l_p_masked, l_g) = if active.iter().any(|&b| b) {
        let mut selected_inconsistency: Option<Var<'t, F>> = None;
        for (s, dd) in inconsistency.iter().enumerate() {
            let one_hot = Array2::from_shape_fn((h, w), |idx| {
                let best = adjusted_vals
                    .iter()
                    .map(|e| e[idx])
                    .fold(F::infinity(), F::min);
                let first_best = adjusted_vals
                    .iter()
                    .position(|e| e[idx] == best)
                    .expect("minimum exists");
                if first_best == s {
                    F::one()
                } else {
                    F::zero()
                }
            });
            let term = *dd * tape.constant(one_hot.into_dyn());
            selected_inconsistency = Some(match selected_inconsistency {
                None => term,
                Some(t) => t + term,
            });
        }
        let d_sel = selected_inconsistency.expect("at least one source");
        let weight_mask = d_sel.scale(-F::one()).offset(F::one());

        let l_p = masked_mean(min_err, &active)?;
        let l_p_masked = masked_mean(weight_mask * min_err, &active)?;
        let l_g = masked_mean(d_sel, &active)?;
        (l_p, l_p_masked, l_g)
    } else {
        // A fully masked photometric term is zero by definition, and with
        // no surviving pixel there is no selected-source disagreement to
        // average.
        let zero = tape.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), F::zero()));
        (zero, zero, zero)
    };

    let l_n = normal_matching_loss_on_tape(sample.target_depth, &sample.pseudo_depth, k);
    let pairs =
        sample_confident_pairs(&sample.pseudo_depth, RANKING_TAU, RANKING_CANDIDATES, rng);
    let l_cdr = ranking_loss_on_tape(sample.target_depth, &pairs, RANKING_MARGIN);
    let gray = target_gray(sample.target_image, h, w);
    let epairs = edge_pairs_from_gray(&gray, EDGE_MAX_PAIRS, rng);
    let l_ern = relative_normal_loss_on_tape(sample.target_depth, &sample.pseudo_depth, &epairs, k);

    let total = l_p_masked.scale(F::c(weights.alpha))
        + l_g.scale(F::c(weights.beta))
        + l_n.scale(F::c(weights.gamma))
        + l_cdr.scale(F::c(weights.delta))
        + l_ern.scale(F::c(weights.epsilon));

    let breakdown = super::total_self_supervision_loss(
        l_p.scalar_value(),
        l_p_masked.scalar_value(),
        l_g.scalar_value(),
        l_n.scalar_value(),
        l_cdr.scalar_value(),
        l_ern.scalar_value(),
        weights,
    )?;
    Ok((total, breakdown))
}

/// Channel mean of a `[3, h, w]` tape constant's value.
fn target_gray<F: Real>(image: Var<'_, F>, h: usize, w: usize) -> Array2<F> {
    let v = image.value();
    let third = F::one() / F::c(3.0);
    Array2::from_shape_fn((h, w), |(r, c)| {
        (v[[0, r, c]] + v[[1, r, c]] + v[[2, r, c]]) * third
    })
}

/// Averages per-sample losses, skipping samples whose validity collapsed.
/// Fails only when every sample is unusable.
pub fn batch_self_supervision<'t, F: Real>(
    samples: &[SelfSupervisionSample<'t, F>],
    k: &Intrinsics<F>,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<(Var<'t, F>, LossBreakdown)> {
    let mut losses = Vec::new();
    let mut sum = LossBreakdown::default();
    for sample in samples {
        match self_supervision_loss(sample, k, weights, rng) {
            Ok((loss, b)) => {
                losses.push(loss);
                sum.l_p += b.l_p;
                sum.l_p_masked += b.l_p_masked;
                sum.l_g += b.l_g;
                sum.l_n += b.l_n;
                sum.l_cdr += b.l_cdr;
                sum.l_ern += b.l_ern;
                sum.l_self += b.l_self;
            }
            Err(Error::EmptyValidity) => {
                log::warn!("sample skipped: no valid pixel survived warping and auto-masking");
            }
            Err(e) => return Err(e),
        }
    }
    if losses.is_empty() {
        return Err(Error::EmptyValidity);
    }
    let n = F::c(1.0 / losses.len() as f64);
    let total = losses[1..]
        .iter()
        .fold(losses[0], |acc, &l| acc + l)
        .scale(n);
    let inv = 1.0 / losses.len() as f64;
    Ok((
        total,
        LossBreakdown {
            l_p: sum.l_p * inv,
            l_p_masked: sum.l_p_masked * inv,
            l_g: sum.l_g * inv,
            l_n: sum.l_n * inv,
            l_cdr: sum.l_cdr * inv,
            l_ern: sum.l_ern * inv,
            l_self: sum.l_self * inv,
        },
    ))
}
