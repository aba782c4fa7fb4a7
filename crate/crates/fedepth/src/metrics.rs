//! Communication and computation cost accounting, plus standard depth
//! error metrics under median scale alignment.
//!
//! Cost formulas are exact: integer arithmetic where the result is an
//! integer, exact rational arithmetic reduced to one final division where
//! a participant fraction is involved.

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::real::Real;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Exact ratio, used for participant fractions so costs and cohort sizes
/// never pick up float error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    num: u64,
    den: u64,
}

impl Fraction {
    /// Builds the reduced form, so structurally equal means numerically
    /// equal.
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::invalid("fraction denominator must be nonzero"));
        }
        let g = gcd(num, den).max(1);
        Ok(Fraction {
            num: num / g,
            den: den / g,
        })
    }

    pub fn one() -> Self {
        Fraction { num: 1, den: 1 }
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// True when the ratio lies in `(0, 1]`.
    pub fn in_unit_interval(&self) -> bool {
        self.num > 0 && self.num <= self.den
    }

    pub fn is_one(&self) -> bool {
        self.num == self.den
    }

    /// Exact `floor(self * n)`.
    pub fn scaled_floor(&self, n: u64) -> u64 {
        (self.num as u128 * n as u128 / self.den as u128) as u64
    }

    /// Cohort size for a pool of `participants`: `max(floor(F * C), 1)`.
    pub fn cohort_size(&self, participants: usize) -> usize {
        (self.scaled_floor(participants as u64) as usize).max(1)
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Fraction {
    type Err = Error;

    /// Parses `"1"`, `"3/4"`, and similar integer-over-integer forms.
    fn from_str(s: &str) -> Result<Self> {
        let parse = |t: &str| -> Result<u64> {
            t.trim()
                .parse::<u64>()
                .map_err(|_| Error::invalid(format!("bad fraction part `{t}` in `{s}`")))
        };
        match s.split_once('/') {
            Some((n, d)) => Fraction::new(parse(n)?, parse(d)?),
            None => Fraction::new(parse(s)?, 1),
        }
    }
}

impl Serialize for Fraction {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Worst-case bytes moved over a whole run: every round, every participant
/// downloads and uploads the full model pair.
pub fn comm_upper_bound(rounds: u64, participants: u64, model_bytes: u64) -> u64 {
    2 * rounds * participants * model_bytes
}

/// Bytes moved when only the selected cohort exchanges models each round:
/// `2 * T * C * F * omega`, computed as an exact rational reduced by one
/// final division.
pub fn comm_lower_bound(
    rounds: u64,
    participants: u64,
    fraction: Fraction,
    model_bytes: u64,
) -> Result<f64> {
    if !fraction.in_unit_interval() {
        return Err(Error::invalid(format!(
            "participant fraction {fraction} must lie in (0, 1]"
        )));
    }
    let numerator =
        2 * rounds as u128 * participants as u128 * model_bytes as u128 * fraction.num as u128;
    Ok(numerator as f64 / fraction.den as f64)
}

/// Bytes one participant moves in one round: a download plus an upload.
pub fn comm_per_participant_round(model_bytes: u64) -> u64 {
    2 * model_bytes
}

/// Gradient steps of a pooled training run.
pub fn steps_centralized(epochs: u64, batches_per_epoch: u64) -> u64 {
    epochs * batches_per_epoch
}

/// Gradient steps across a federated run: for every round, the sum over
/// its cohort of local epochs times batches per epoch.
pub fn steps_federated(rounds: &[Vec<(u64, u64)>]) -> u64 {
    rounds
        .iter()
        .flatten()
        .map(|&(epochs, batches)| epochs * batches)
        .sum()
}

/// Cost envelope of one experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub w_max: u64,
    pub w_min: f64,
    pub per_participant_per_round: u64,
    pub steps_total: u64,
    pub steps_per_participant: IndexMap<usize, u64>,
}

impl CostReport {
    /// Communication bounds for a configuration; step fields start empty
    /// and are filled in by the trainer.
    pub fn for_config(
        rounds: u64,
        participants: u64,
        fraction: Fraction,
        model_bytes: u64,
    ) -> Result<Self> {
        Ok(CostReport {
            w_max: comm_upper_bound(rounds, participants, model_bytes),
            w_min: comm_lower_bound(rounds, participants, fraction, model_bytes)?,
            per_participant_per_round: comm_per_participant_round(model_bytes),
            steps_total: 0,
            steps_per_participant: IndexMap::new(),
        })
    }
}

/// Standard depth evaluation errors over one prediction set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rms: f64,
    pub rms_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const CSV_HEADER: &'static str = "abs_rel,sq_rel,rms,rms_log,delta1,delta2,delta3";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.abs_rel, self.sq_rel, self.rms, self.rms_log, self.delta1, self.delta2, self.delta3
        )
    }

    /// Per-field arithmetic mean across images; `None` for an empty slice.
    pub fn mean(per_image: &[DepthMetrics]) -> Option<DepthMetrics> {
        if per_image.is_empty() {
            return None;
        }
        let n = per_image.len() as f64;
        let mut sum = DepthMetrics::default();
        for m in per_image {
            sum.abs_rel += m.abs_rel;
            sum.sq_rel += m.sq_rel;
            sum.rms += m.rms;
            sum.rms_log += m.rms_log;
            sum.delta1 += m.delta1;
            sum.delta2 += m.delta2;
            sum.delta3 += m.delta3;
        }
        Some(DepthMetrics {
            abs_rel: sum.abs_rel / n,
            sq_rel: sum.sq_rel / n,
            rms: sum.rms / n,
            rms_log: sum.rms_log / n,
            delta1: sum.delta1 / n,
            delta2: sum.delta2 / n,
            delta3: sum.delta3 / n,
        })
    }
}

/// Evaluation mask: pixels whose reference depth lies in `(0, cap]`.
pub fn valid_depth_mask<F: Real>(gt: &Array2<F>, cap: f64) -> Array2<bool> {
    let cap = F::c(cap);
    gt.mapv(|g| g > F::zero() && g <= cap)
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite depths"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Multiplies the prediction by `median(gt) / median(pred)` over the valid
/// pixels, removing the global scale ambiguity of a monocular prediction.
pub fn median_scale_align<F: Real>(
    pred: &Array2<F>,
    gt: &Array2<F>,
    valid: &Array2<bool>,
) -> Result<Array2<F>> {
    if pred.dim() != gt.dim() || pred.dim() != valid.dim() {
        return Err(Error::shape(format!(
            "prediction {:?}, reference {:?}, and mask {:?} must agree",
            pred.dim(),
            gt.dim(),
            valid.dim()
        )));
    }
    let mut p = Vec::new();
    let mut g = Vec::new();
    for ((pv, gv), &m) in pred.iter().zip(gt.iter()).zip(valid.iter()) {
        if m {
            if *pv <= F::zero() || *gv <= F::zero() {
                return Err(Error::Evaluation(
                    "depths must be positive on valid pixels".into(),
                ));
            }
            p.push(pv.f64());
            g.push(gv.f64());
        }
    }
    if p.is_empty() {
        return Err(Error::Evaluation(
            "no valid pixel to align the depth scale on".into(),
        ));
    }
    let scale = F::c(median(g) / median(p));
    Ok(pred.mapv(|v| v * scale))
}

/// Error statistics of a scaled prediction against its reference over the
/// valid pixels.
pub fn depth_errors<F: Real>(
    pred: &Array2<F>,
    gt: &Array2<F>,
    valid: &Array2<bool>,
) -> Result<DepthMetrics> {
    if pred.dim() != gt.dim() || pred.dim() != valid.dim() {
        return Err(Error::shape(format!(
            "prediction {:?}, reference {:?}, and mask {:?} must agree",
            pred.dim(),
            gt.dim(),
            valid.dim()
        )));
    }
    let mut n = 0.0f64;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let (mut d1, mut d2, mut d3) = (0.0, 0.0, 0.0);
    for ((pv, gv), &m) in pred.iter().zip(gt.iter()).zip(valid.iter()) {
        if !m {
            continue;
        }
        let (p, g) = (pv.f64(), gv.f64());
        if p <= 0.0 || g <= 0.0 {
            return Err(Error::Evaluation(
                "depths must be positive on valid pixels".into(),
            ));
        }
        n += 1.0;
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        sq_log += (p.ln() - g.ln()).powi(2);
        let ratio = (p / g).max(g / p);
        if ratio < 1.25 {
            d1 += 1.0;
        }
        if ratio < 1.25f64.powi(2) {
            d2 += 1.0;
        }
        if ratio < 1.25f64.powi(3) {
            d3 += 1.0;
        }
    }
    if n == 0.0 {
        return Err(Error::Evaluation("no valid pixel to evaluate on".into()));
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rms: (sq / n).sqrt(),
        rms_log: (sq_log / n).sqrt(),
        delta1: d1 / n,
        delta2: d2 / n,
        delta3: d3 / n,
    })
}

/// Median alignment followed by error evaluation, the standard protocol
/// for scale-ambiguous predictions. The mask is `(0, cap]` on the
/// reference.
pub fn evaluate_aligned<F: Real>(
    pred: &Array2<F>,
    gt: &Array2<F>,
    cap: f64,
) -> Result<DepthMetrics> {
    let valid = valid_depth_mask(gt, cap);
    let aligned = median_scale_align(pred, gt, &valid)?;
    depth_errors(&aligned, gt, &valid)
}

/// Separate error statistics for the two region classes of an external
/// mask (true marks the moving-object class). A class with no valid pixel
/// is reported as absent.
pub fn region_split_errors<F: Real>(
    pred: &Array2<F>,
    gt: &Array2<F>,
    valid: &Array2<bool>,
    region: &Array2<bool>,
) -> Result<(Option<DepthMetrics>, Option<DepthMetrics>)> {
    if region.dim() != valid.dim() {
        return Err(Error::shape(format!(
            "region mask {:?} vs validity mask {:?}",
            region.dim(),
            valid.dim()
        )));
    }
    let class_mask = |want: bool| {
        let mut m = valid.clone();
        for (mv, &r) in m.iter_mut().zip(region.iter()) {
            *mv = *mv && r == want;
        }
        m
    };
    let run = |mask: Array2<bool>| -> Result<Option<DepthMetrics>> {
        if mask.iter().any(|&m| m) {
            depth_errors(pred, gt, &mask).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok((run(class_mask(true))?, run(class_mask(false))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn upper_bound_is_two_transfers_per_participant_round() {
        assert_eq!(comm_upper_bound(1, 1, 1), 2);
        assert_eq!(comm_upper_bound(5, 3, 0), 0);
        // 0.2075 GB models, 12 rounds, 10 participants: 49.8 GB.
        assert_eq!(comm_upper_bound(12, 10, 207_500_000), 49_800_000_000);
        assert_eq!(comm_per_participant_round(207_500_000), 415_000_000);
    }

    #[test]
    fn lower_bound_scales_by_the_fraction_exactly() {
        let full = comm_lower_bound(12, 10, Fraction::one(), 207_500_000).unwrap();
        assert_eq!(full, comm_upper_bound(12, 10, 207_500_000) as f64);

        let half = comm_lower_bound(12, 10, Fraction::new(1, 2).unwrap(), 207_500_000).unwrap();
        assert_eq!(half, 24_900_000_000.0);

        let third = comm_lower_bound(1, 1, Fraction::new(1, 3).unwrap(), 1).unwrap();
        assert!((third - 2.0 / 3.0).abs() < 1e-15);

        assert!(comm_lower_bound(1, 1, Fraction::new(0, 3).unwrap(), 1).is_err());
        assert!(comm_lower_bound(1, 1, Fraction::new(4, 3).unwrap(), 1).is_err());
    }

    #[test]
    fn step_totals_are_plain_products_and_sums() {
        assert_eq!(steps_centralized(100, 1000), 100_000);
        assert_eq!(steps_centralized(0, 1000), 0);
        assert_eq!(steps_centralized(1, 1), 1);

        let rounds: Vec<Vec<(u64, u64)>> = (0..12).map(|_| vec![(3, 1000); 5]).collect();
        assert_eq!(steps_federated(&rounds), 180_000);
        assert_eq!(steps_federated(&[vec![(1, 1)]]), 1);
        assert_eq!(steps_federated(&[]), 0);
    }

    #[test]
    fn fraction_parsing_and_cohorts() {
        let f: Fraction = "1/3".parse().unwrap();
        assert_eq!(f.cohort_size(9), 3);
        assert_eq!(f.cohort_size(10), 3);
        assert_eq!(f.cohort_size(2), 1, "floor clamps up to one");
        assert_eq!(Fraction::one().cohort_size(7), 7);
        assert_eq!("2".parse::<Fraction>().unwrap(), Fraction::new(2, 1).unwrap());
        assert_eq!(format!("{}", Fraction::new(3, 4).unwrap()), "3/4");
        assert_eq!(format!("{}", Fraction::one()), "1");
        assert!("x/2".parse::<Fraction>().is_err());
        assert!("1/0".parse::<Fraction>().is_err());
    }

    #[test]
    fn cost_report_bounds_are_consistent() {
        let r = CostReport::for_config(12, 10, Fraction::new(1, 2).unwrap(), 207_500_000).unwrap();
        assert_eq!(r.w_max, 49_800_000_000);
        assert_eq!(r.w_min, 24_900_000_000.0);
        assert!(r.w_min <= r.w_max as f64);
        let full = CostReport::for_config(12, 10, Fraction::one(), 207_500_000).unwrap();
        assert_eq!(full.w_min, full.w_max as f64);
    }

    fn arrays(seed: u64, n: usize) -> (Array2<f64>, Array2<f64>, Array2<bool>) {
        let mut rng = crate::rng::stream(seed, "metrics-test", &[]);
        let pred = Array2::from_shape_fn((1, n), |_| rng.random_range(0.5..60.0));
        let gt = Array2::from_shape_fn((1, n), |_| rng.random_range(0.5..60.0));
        let valid = Array2::from_elem((1, n), true);
        (pred, gt, valid)
    }

    #[test]
    fn perfect_predictions_have_zero_error_and_full_accuracy() {
        let (_, gt, valid) = arrays(1, 50);
        let m = depth_errors(&gt, &gt, &valid).unwrap();
        assert_eq!(m.abs_rel, 0.0);
        assert_eq!(m.sq_rel, 0.0);
        assert_eq!(m.rms, 0.0);
        assert_eq!(m.rms_log, 0.0);
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_computed_error_case() {
        let gt = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let pred = Array2::from_shape_vec((1, 3), vec![2.0, 2.0, 2.0]).unwrap();
        let valid = Array2::from_elem((1, 3), true);
        let m = depth_errors(&pred, &gt, &valid).unwrap();
        assert!((m.abs_rel - 4.0 / 9.0).abs() < 1e-15);
        // SqRel: (1/1 + 0 + 1/3)/3; RMS: sqrt(2/3).
        assert!((m.sq_rel - 4.0 / 9.0).abs() < 1e-15);
        assert!((m.rms - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let want_log = ((2.0f64.ln().powi(2) + (2.0f64 / 3.0).ln().powi(2)) / 3.0).sqrt();
        assert!((m.rms_log - want_log).abs() < 1e-15);
        // Ratios are 2, 1, 1.5: only the exact match clears 1.25.
        assert!((m.delta1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.delta2 - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.delta3 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn median_alignment_cancels_any_positive_scale() {
        let (pred, gt, valid) = arrays(2, 101);
        let aligned = median_scale_align(&pred, &gt, &valid).unwrap();
        let base = depth_errors(&aligned, &gt, &valid).unwrap();
        for k in [0.03, 0.7, 41.0] {
            let scaled = pred.mapv(|v| v * k);
            let re = median_scale_align(&scaled, &gt, &valid).unwrap();
            let m = depth_errors(&re, &gt, &valid).unwrap();
            assert!((m.abs_rel - base.abs_rel).abs() < 1e-9);
            assert!((m.rms - base.rms).abs() < 1e-9);
            assert!((m.rms_log - base.rms_log).abs() < 1e-9);
            assert!((m.delta1 - base.delta1).abs() < 1e-9);
        }
    }

    #[test]
    fn proportional_predictions_align_exactly() {
        let (_, gt, valid) = arrays(3, 64);
        let pred = gt.mapv(|v| v * 2.0);
        let aligned = median_scale_align(&pred, &gt, &valid).unwrap();
        for (a, g) in aligned.iter().zip(gt.iter()) {
            assert!((a - g).abs() < 1e-12);
        }
    }

    #[test]
    fn even_counts_use_the_mean_of_the_middle_pair() {
        let gt = Array2::from_shape_vec((1, 4), vec![1.0, 2.0, 4.0, 8.0]).unwrap();
        let pred = Array2::from_elem((1, 4), 1.0);
        let valid = Array2::from_elem((1, 4), true);
        // gt median (2+4)/2 = 3, pred median 1, so every pixel becomes 3.
        let aligned = median_scale_align(&pred, &gt, &valid).unwrap();
        assert!(aligned.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn masks_and_caps_select_the_evaluation_pixels() {
        let gt = Array2::from_shape_vec((1, 4), vec![0.0, 5.0, 120.0, 80.0]).unwrap();
        let mask = valid_depth_mask(&gt, 80.0);
        assert_eq!(
            mask.iter().copied().collect::<Vec<bool>>(),
            [false, true, false, true]
        );

        let empty = Array2::from_elem((1, 4), false);
        let pred = Array2::from_elem((1, 4), 1.0);
        assert!(depth_errors(&pred, &gt, &empty).is_err());
        assert!(median_scale_align(&pred, &gt, &empty).is_err());
    }

    #[test]
    fn region_split_reports_absent_classes_as_absent() {
        let (pred, gt, valid) = arrays(4, 40);
        let all_static = Array2::from_elem((1, 40), false);
        let (dynamic, stat) = region_split_errors(&pred, &gt, &valid, &all_static).unwrap();
        assert!(dynamic.is_none());
        let whole = depth_errors(&pred, &gt, &valid).unwrap();
        assert_eq!(stat.unwrap(), whole);

        let (dynamic, stat) = region_split_errors(&gt, &gt, &valid, &valid).unwrap();
        assert_eq!(dynamic.unwrap().abs_rel, 0.0);
        assert!(stat.is_none());
    }

    proptest! {
        #[test]
        fn accuracy_thresholds_are_monotonic(seed in 0u64..500) {
            let (pred, gt, valid) = arrays(seed, 37);
            let m = depth_errors(&pred, &gt, &valid).unwrap();
            prop_assert!(m.delta1 <= m.delta2);
            prop_assert!(m.delta2 <= m.delta3);
            prop_assert!(m.delta3 <= 1.0);
        }

        #[test]
        fn bounds_order_holds_with_equality_only_at_full_fraction(
            t in 0u64..50,
            c in 0u64..50,
            omega in 0u64..10_000_000,
            num in 1u64..12,
            den in 1u64..12,
        ) {
            prop_assume!(num <= den);
            let f = Fraction::new(num, den).unwrap();
            let lo = comm_lower_bound(t, c, f, omega).unwrap();
            let hi = comm_upper_bound(t, c, omega) as f64;
            prop_assert!(lo <= hi);
            if f.is_one() {
                prop_assert_eq!(lo, hi);
            } else if t > 0 && c > 0 && omega > 0 {
                prop_assert!(lo < hi);
            }
        }

        #[test]
        fn federated_steps_match_a_scalar_loop(
            rounds in proptest::collection::vec(
                proptest::collection::vec((0u64..40, 0u64..40), 0..6),
                0..8,
            ),
        ) {
            let mut want = 0u64;
            for round in &rounds {
                for &(e, b) in round {
                    let mut acc = 0u64;
                    for _ in 0..e { acc += b; }
                    want += acc;
                }
            }
            prop_assert_eq!(steps_federated(&rounds), want);
        }
    }
}
