//! Self-supervision losses for view synthesis.
//!
//! The photometric core compares a frame against its warp-based
//! reconstruction with an L1 + SSIM mixture, restricted to the warp's
//! validity mask. Depth-consistency, normal, ranking, and relative-normal
//! terms regularize against a frozen pseudo-depth prior. Everything is
//! built from tape operations so gradients reach depth and pose inputs;
//! the plain functions here wrap constant tapes for evaluation-only use.

pub mod normals;
pub mod pipeline;

pub use normals::{
    confident_depth_ranking_loss, edge_aware_relative_normal_loss, edge_pairs,
    edge_pairs_from_gray, normal_matching_loss, sample_confident_pairs, unit_normals_on_tape,
    NormalField, RankedPair,
};
pub use pipeline::{self_supervision_loss, SelfSupervisionSample, WarpSource};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::camera::{ImageFrame, WarpResult};
use crate::error::{Error, Result};
use crate::real::Real;

/// SSIM luminance stabilizer for images in `[0, 1]`.
pub const SSIM_C1: f64 = 1e-4;
/// SSIM contrast stabilizer for images in `[0, 1]`.
pub const SSIM_C2: f64 = 9e-4;

/// Mixture weights of the combined training objective.
///
/// `alpha..epsilon` weight the masked photometric, geometry-consistency,
/// normal-matching, depth-ranking, and relative-normal terms; `lambda_i` and
/// `lambda_s` split the per-pixel photometric error between L1 and SSIM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub lambda_i: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.1,
            delta: 0.1,
            epsilon: 0.1,
            lambda_i: 0.15,
            lambda_s: 0.85,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha,
            self.beta,
            self.gamma,
            self.delta,
            self.epsilon,
            self.lambda_i,
            self.lambda_s,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Per-term loss values of one training sample or batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub l_p: f64,
    pub l_p_masked: f64,
    pub l_g: f64,
    pub l_n: f64,
    pub l_cdr: f64,
    pub l_ern: f64,
    pub l_self: f64,
}

/// Mean of `map` over the pixels where `valid` is true.
pub fn masked_mean<'t, F: Real>(map: Var<'t, F>, valid: &Array2<bool>) -> Result<Var<'t, F>> {
    let n = valid.iter().filter(|&&b| b).count();
    if n == 0 {
        return Err(Error::EmptyValidity);
    }
    let m = map
        .tape()
        .constant(indicator(valid).into_dyn());
    Ok((map * m).sum_all().scale(F::c(1.0 / n as f64)))
}

/// 0/1 float image of a boolean mask.
pub fn indicator<F: Real>(mask: &Array2<bool>) -> Array2<F> {
    mask.mapv(|b| if b { F::one() } else { F::zero() })
}

/// Windowed SSIM between two `[3, h, w]` images, averaged over channels.
///
/// Statistics come from a border-aware 3x3 mean filter, so constant images
/// have exactly zero variance everywhere including the border.
pub fn ssim_map_on_tape<'t, F: Real>(a: Var<'t, F>, b: Var<'t, F>) -> Var<'t, F> {
    let channels = a.dims()[0];
    let c1 = F::c(SSIM_C1);
    let c2 = F::c(SSIM_C2);
    let mut acc: Option<Var<'t, F>> = None;
    for ch in 0..channels {
        let x = a.index_axis0(ch);
        let y = b.index_axis0(ch);
        let mx = x.box3_filter();
        let my = y.box3_filter();
        let vx = (x * x).box3_filter() - mx * mx;
        let vy = (y * y).box3_filter() - my * my;
        let cxy = (x * y).box3_filter() - mx * my;
        let lum = (mx * my).scale(F::c(2.0)).offset(c1);
        let con = cxy.scale(F::c(2.0)).offset(c2);
        let dl = (mx * mx + my * my).offset(c1);
        let dc = (vx + vy).offset(c2);
        let s = (lum * con) / (dl * dc);
        acc = Some(match acc {
            None => s,
            Some(t) => t + s,
        });
    }
    acc.expect("at least one channel").scale(F::c(1.0 / channels as f64))
}

/// Per-pixel photometric error `lambda_i * L1 + lambda_s * (1 - SSIM) / 2`,
/// with the L1 term averaged over channels. Inputs are `[3, h, w]`.
pub fn photometric_error_map<'t, F: Real>(
    reconstruction: Var<'t, F>,
    target: Var<'t, F>,
    weights: &LossWeights,
) -> Var<'t, F> {
    let l1 = (reconstruction - target).abs().mean_axis(0);
    let ssim = ssim_map_on_tape(reconstruction, target);
    let li = F::c(weights.lambda_i);
    let ls = F::c(weights.lambda_s);
    l1.scale(li) + ssim.scale(-ls / F::c(2.0)).offset(ls / F::c(2.0))
}

/// Windowed SSIM between two images, `[h, w]`, channel-averaged.
pub fn ssim_map<F: Real>(a: &ImageFrame<F>, b: &ImageFrame<F>) -> Result<Array2<F>> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::shape(format!(
            "ssim inputs {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    let tape: Tape<F> = Tape::new();
    let av = tape.constant(a.to_chw());
    let bv = tape.constant(b.to_chw());
    let s = ssim_map_on_tape(av, bv);
    Ok(s
        .value()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("ssim map is 2-d"))
}

/// Photometric loss of a warp against its target: mean of the per-pixel
/// L1 + SSIM error over the validity mask.
pub fn photometric_loss<F: Real>(
    warp: &WarpResult<F>,
    target: &ImageFrame<F>,
    weights: &LossWeights,
) -> Result<F> {
    let tape: Tape<F> = Tape::new();
    let recon = tape.constant(warp.reconstruction.to_chw());
    let tv = tape.constant(target.to_chw());
    let map = photometric_error_map(recon, tv, weights);
    Ok(masked_mean(map, &warp.validity)?.scalar_value())
}

/// Relative disagreement `|d1 - d2| / (d1 + d2)` between two positive depth
/// fields on `valid`; zero elsewhere. Symmetric and bounded in `[0, 1)`.
pub fn depth_inconsistency<F: Real>(
    projected: &Array2<F>,
    interpolated: &Array2<F>,
    valid: &Array2<bool>,
) -> Result<Array2<F>> {
    if projected.dim() != interpolated.dim() || projected.dim() != valid.dim() {
        return Err(Error::shape("depth inconsistency input shapes differ"));
    }
    let mut out = Array2::zeros(projected.dim());
    for ((idx, &p), &i) in projected.indexed_iter().zip(interpolated.iter()) {
        if !valid[idx] {
            continue;
        }
        if p <= F::zero() || i <= F::zero() {
            return Err(Error::invalid(format!(
                "non-positive depth ({p}, {i}) inside the validity mask"
            )));
        }
        out[idx] = (p - i).abs() / (p + i);
    }
    Ok(out)
}

/// Photometric loss with a per-pixel weight in `(0, 1]` applied inside the
/// validity average.
pub fn mask_weighted_photometric<F: Real>(
    warp: &WarpResult<F>,
    target: &ImageFrame<F>,
    mask: &Array2<F>,
    weights: &LossWeights,
) -> Result<F> {
    let tape: Tape<F> = Tape::new();
    let recon = tape.constant(warp.reconstruction.to_chw());
    let tv = tape.constant(target.to_chw());
    let map = photometric_error_map(recon, tv, weights);
    let mv = tape.constant(mask.clone().into_dyn());
    Ok(masked_mean(map * mv, &warp.validity)?.scalar_value())
}

/// Mean depth inconsistency over the validity mask.
pub fn geometry_consistency_loss<F: Real>(
    inconsistency: &Array2<F>,
    valid: &Array2<bool>,
) -> Result<F> {
    let n = valid.iter().filter(|&&b| b).count();
    if n == 0 {
        return Err(Error::EmptyValidity);
    }
    let mut s = F::zero();
    for (idx, &v) in inconsistency.indexed_iter() {
        if valid[idx] {
            s += v;
        }
    }
    Ok(s / F::c(n as f64))
}

/// Elementwise minimum over per-source error maps, plus the auto-mask that
/// keeps a pixel only when the best warped error beats the best identity
/// (unwarped) error. An empty identity list keeps every pixel.
pub fn min_reprojection_with_automask<F: Real>(
    per_source_errors: &[Array2<F>],
    identity_errors: &[Array2<F>],
) -> Result<(Array2<F>, Array2<bool>)> {
    let first = per_source_errors
        .first()
        .ok_or_else(|| Error::invalid("min-reprojection needs at least one source"))?;
    let dim = first.dim();
    for e in per_source_errors.iter().chain(identity_errors.iter()) {
        if e.dim() != dim {
            return Err(Error::shape("error maps must share one shape"));
        }
    }
    let mut min_err = first.clone();
    for e in &per_source_errors[1..] {
        min_err.zip_mut_with(e, |a, &b| {
            if b < *a {
                *a = b;
            }
        });
    }
    let mask = if identity_errors.is_empty() {
        Array2::from_elem(dim, true)
    } else {
        let mut min_id = identity_errors[0].clone();
        for e in &identity_errors[1..] {
            min_id.zip_mut_with(e, |a, &b| {
                if b < *a {
                    *a = b;
                }
            });
        }
        Array2::from_shape_fn(dim, |idx| min_err[idx] < min_id[idx])
    };
    Ok((min_err, mask))
}

/// Weighted combination of the five loss terms into one training objective,
/// recording every component.
pub fn total_self_supervision_loss<F: Real>(
    l_p: F,
    l_p_masked: F,
    l_g: F,
    l_n: F,
    l_cdr: F,
    l_ern: F,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("photometric", l_p),
        ("masked photometric", l_p_masked),
        ("geometry consistency", l_g),
        ("normal matching", l_n),
        ("depth ranking", l_cdr),
        ("relative normal", l_ern),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{name} loss term"),
            });
        }
    }
    let l_self = weights.alpha * l_p_masked.f64()
        + weights.beta * l_g.f64()
        + weights.gamma * l_n.f64()
        + weights.delta * l_cdr.f64()
        + weights.epsilon * l_ern.f64();
    Ok(LossBreakdown {
        l_p: l_p.f64(),
        l_p_masked: l_p_masked.f64(),
        l_g: l_g.f64(),
        l_n: l_n.f64(),
        l_cdr: l_cdr.f64(),
        l_ern: l_ern.f64(),
        l_self,
    })
}
