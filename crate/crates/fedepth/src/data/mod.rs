//! Sample stores, batching, synthetic scene generation, file ingestion,
//! and the participant partitioning schemes.

mod kitti;
mod partition;
mod synthetic;

pub use kitti::{load_kitti_layout, LoaderConfig};
pub use partition::{partition_iid, partition_niid, PartitionPlan, Scenario};
pub use synthetic::{generate_synthetic_scene, SceneSpec};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::camera::{ImageFrame, Intrinsics, PoseSE3};
use crate::error::{Error, Result};
use crate::real::Real;

/// One training instance: a target frame plus its adjacent source frames.
///
/// Ground truth, true poses, and region masks are evaluation extras;
/// training only ever sees the frames and the intrinsics.
#[derive(Debug, Clone)]
pub struct Sample<F: Real> {
    pub target: ImageFrame<F>,
    pub sources: Vec<ImageFrame<F>>,
    pub intrinsics: Intrinsics<F>,
    pub drive_id: String,
    pub frame_index: usize,
    /// Reference depth in metres, 0 where no reading exists.
    pub ground_truth: Option<Array2<F>>,
    /// Exact target-to-source poses, available for rendered scenes only.
    pub true_poses: Option<Vec<PoseSE3<F>>>,
    /// True marks pixels on moving-object stand-ins, for split evaluation.
    pub region_mask: Option<Array2<bool>>,
}

impl<F: Real> Sample<F> {
    /// Shape and alignment invariants shared by every ingestion path.
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::invalid(format!(
                "sample {}/{} has no source frames",
                self.drive_id, self.frame_index
            )));
        }
        let (h, w) = (self.target.height(), self.target.width());
        if (self.intrinsics.height, self.intrinsics.width) != (h, w) {
            return Err(Error::shape(format!(
                "sample {}/{}: intrinsics {}x{} vs frame {}x{}",
                self.drive_id,
                self.frame_index,
                self.intrinsics.height,
                self.intrinsics.width,
                h,
                w
            )));
        }
        for s in &self.sources {
            if (s.height(), s.width()) != (h, w) {
                return Err(Error::shape(format!(
                    "sample {}/{}: source frame {}x{} vs target {}x{}",
                    self.drive_id,
                    self.frame_index,
                    s.height(),
                    s.width(),
                    h,
                    w
                )));
            }
        }
        if let Some(p) = &self.true_poses {
            if p.len() != self.sources.len() {
                return Err(Error::invalid(format!(
                    "sample {}/{}: {} poses for {} sources",
                    self.drive_id,
                    self.frame_index,
                    p.len(),
                    self.sources.len()
                )));
            }
        }
        if let Some(g) = &self.ground_truth {
            if g.dim() != (h, w) {
                return Err(Error::shape(format!(
                    "sample {}/{}: ground truth {:?} vs frame {}x{}",
                    self.drive_id,
                    self.frame_index,
                    g.dim(),
                    h,
                    w
                )));
            }
        }
        if let Some(m) = &self.region_mask {
            if m.dim() != (h, w) {
                return Err(Error::shape(format!(
                    "sample {}/{}: region mask {:?} vs frame {}x{}",
                    self.drive_id,
                    self.frame_index,
                    m.dim(),
                    h,
                    w
                )));
            }
        }
        Ok(())
    }
}

/// Per-drive sample counts in first-seen order.
pub fn drive_histogram<F: Real>(samples: &[Sample<F>]) -> indexmap::IndexMap<String, usize> {
    let mut hist = indexmap::IndexMap::new();
    for s in samples {
        *hist.entry(s.drive_id.clone()).or_insert(0) += 1;
    }
    hist
}

/// Index batches for one epoch over `sample_count` samples.
///
/// When the samples fit the quota exactly (`quota * batch_size` equals the
/// sample count) every sample appears exactly once, in shuffled order. When
/// there are more, a shuffled prefix is used; when there are fewer, the
/// remaining batches are drawn uniformly with replacement until the quota
/// is met. Exactly `batches_per_epoch` batches come back either way.
pub fn make_batches(
    sample_count: usize,
    batches_per_epoch: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    if sample_count == 0 {
        return Err(Error::invalid("cannot batch an empty sample list"));
    }
    if batches_per_epoch == 0 || batch_size == 0 {
        return Err(Error::invalid("batch quota and batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..sample_count).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order
        .chunks_exact(batch_size)
        .take(batches_per_epoch)
        .map(|c| c.to_vec())
        .collect();
    while batches.len() < batches_per_epoch {
        batches.push(
            (0..batch_size)
                .map(|_| rng.random_range(0..sample_count))
                .collect(),
        );
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn exact_fit_visits_every_sample_once() {
        let mut rng = stream(7, "batch-test", &[0]);
        let batches = make_batches(4000, 1000, 4, &mut rng).unwrap();
        assert_eq!(batches.len(), 1000);
        let mut seen = vec![0usize; 4000];
        for b in &batches {
            assert_eq!(b.len(), 4);
            for &i in b {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn small_pools_resample_with_replacement_to_the_quota() {
        let mut rng = stream(7, "batch-test", &[1]);
        let batches = make_batches(40, 1000, 4, &mut rng).unwrap();
        assert_eq!(batches.len(), 1000);
        assert!(batches.iter().all(|b| b.len() == 4));
        assert!(batches.iter().flatten().all(|&i| i < 40));
    }

    #[test]
    fn batching_is_deterministic_in_the_seed() {
        let a = make_batches(100, 30, 4, &mut stream(9, "batch-test", &[2])).unwrap();
        let b = make_batches(100, 30, 4, &mut stream(9, "batch-test", &[2])).unwrap();
        let c = make_batches(100, 30, 4, &mut stream(10, "batch-test", &[2])).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_batch_requests_are_rejected() {
        let mut rng = stream(7, "batch-test", &[3]);
        assert!(make_batches(0, 10, 4, &mut rng).is_err());
        assert!(make_batches(10, 0, 4, &mut rng).is_err());
        assert!(make_batches(10, 10, 0, &mut rng).is_err());
    }

    #[test]
    fn oversized_pools_use_a_shuffled_prefix() {
        let mut rng = stream(7, "batch-test", &[4]);
        let batches = make_batches(1000, 10, 4, &mut rng).unwrap();
        assert_eq!(batches.len(), 10);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n, "prefix of a permutation has no repeats");
    }
}
