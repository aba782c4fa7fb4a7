//! Round-based distributed training of the shared depth and pose networks.
//!
//! Each round a cohort of participants downloads the global parameters,
//! runs local self-supervised epochs on its own samples, and uploads the
//! result; the server replaces the global model with the sample-count
//! weighted mean of the survivors. The centralized baseline reuses the
//! same epoch loop with a single participant that owns every sample, so
//! the two modes are comparable step for step.

use std::collections::VecDeque;

use ndarray::{s, Array2, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::camera::ImageFrame;
use crate::data::{make_batches, PartitionPlan, Sample, Scenario};
use crate::error::{Error, Result};
use crate::losses::pipeline::{self_supervision_loss, SelfSupervisionSample, WarpSource};
use crate::losses::{LossBreakdown, LossWeights};
use crate::metrics::{
    comm_lower_bound, comm_upper_bound, evaluate_aligned, DepthMetrics, Fraction,
};
use crate::models::{
    depth_net_on_tape, parameter_bytes, pose_net_on_tape, sigmoid_to_depth,
    sigmoid_to_depth_on_tape, Adam, DepthNetwork, NetworkWidths, ParameterSet, PoseNetwork,
    PseudoDepthProvider, TapeParams,
};
use crate::real::Real;
use crate::rng;

/// Reference depths beyond this distance are ignored during evaluation.
pub const EVAL_DEPTH_CAP: f64 = 80.0;

/// Schedule and optimizer settings of one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    /// Number of participants the cohort is drawn from.
    pub participants: usize,
    /// Fraction of participants active per round.
    pub fraction: Fraction,
    /// Local passes over a participant's data per round.
    pub local_epochs: u64,
    pub total_rounds: u64,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Master seed; every random stream of the run derives from it.
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            participants: 1,
            fraction: Fraction::one(),
            local_epochs: 1,
            total_rounds: 1,
            batches_per_epoch: 1000,
            batch_size: 4,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.participants == 0 {
            return Err(Error::invalid("a run needs at least one participant"));
        }
        if !self.fraction.in_unit_interval() {
            return Err(Error::invalid(format!(
                "participant fraction {} must lie in (0, 1]",
                self.fraction
            )));
        }
        if self.local_epochs == 0 || self.total_rounds == 0 {
            return Err(Error::invalid("epochs and rounds must both be at least 1"));
        }
        if self.batches_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::invalid("batch shape must be at least 1x1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Cohort size per round: `max(floor(fraction * participants), 1)`.
    pub fn cohort_size(&self) -> usize {
        self.fraction.cohort_size(self.participants)
    }
}

/// The aggregated parameters every round starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GlobalModel<F: Real> {
    pub depth: ParameterSet<F>,
    pub pose: ParameterSet<F>,
    /// Completed aggregations; an aborted round leaves it unchanged.
    pub version: u64,
}

impl<F: Real> GlobalModel<F> {
    /// Freshly initialized networks, deterministic in the seed.
    pub fn init(widths: NetworkWidths, seed: u64) -> Self {
        let depth = DepthNetwork::<F>::new(widths, &mut rng::stream(seed, "init-depth", &[]));
        let pose = PoseNetwork::<F>::new(widths, &mut rng::stream(seed, "init-pose", &[]));
        GlobalModel {
            depth: depth.params,
            pose: pose.params,
            version: 0,
        }
    }

    /// Bytes one participant moves per direction per round.
    pub fn transfer_bytes(&self) -> u64 {
        parameter_bytes(&[&self.depth, &self.pose])
    }
}

/// One participant: its shard of the training set plus persistent local
/// optimizer state. The optimizer moments never travel to the server.
pub struct ParticipantState<F: Real> {
    pub id: usize,
    pub sample_ids: Vec<usize>,
    /// Derived from the master seed and the id; keys every local stream.
    pub seed: u64,
    adam_depth: Adam<F>,
    adam_pose: Adam<F>,
}

impl<F: Real> ParticipantState<F> {
    pub fn new(
        id: usize,
        sample_ids: Vec<usize>,
        master_seed: u64,
        learning_rate: f64,
    ) -> Result<Self> {
        if sample_ids.is_empty() {
            return Err(Error::invalid(format!(
                "participant {id} was assigned no samples"
            )));
        }
        Ok(ParticipantState {
            id,
            sample_ids,
            seed: rng::derive_seed(master_seed, "participant", &[id as u64]),
            adam_depth: Adam::new(learning_rate),
            adam_pose: Adam::new(learning_rate),
        })
    }

    pub fn sample_count(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.adam_depth.steps_taken()
    }

    /// Drops accumulated optimizer moments, as after a process restart.
    pub fn reset_optimizer(&mut self, learning_rate: f64) {
        self.adam_depth = Adam::new(learning_rate);
        self.adam_pose = Adam::new(learning_rate);
    }
}

/// How the per-round cohort is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionPolicy {
    /// Independent uniform draw each round.
    Uniform,
    /// Without replacement across rounds: every participant is visited
    /// once before any is visited again.
    Rotating,
}

impl SelectionPolicy {
    /// Distribution scenarios with concentrated shards rotate through
    /// participants so every shard is seen; the rest draw uniformly.
    pub fn for_scenario(scenario: Scenario) -> Self {
        match scenario {
            Scenario::FtNiid => SelectionPolicy::Rotating,
            _ => SelectionPolicy::Uniform,
        }
    }
}

/// Ids of the cohort for `round`, sorted ascending. A pure function of
/// the config seed and the round, so any round can be re-derived later.
pub fn select_participants<F: Real>(
    config: &RoundConfig,
    pool: &[ParticipantState<F>],
    round: u64,
    policy: SelectionPolicy,
) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::invalid("participant pool is empty"));
    }
    if pool.len() != config.participants {
        return Err(Error::invalid(format!(
            "pool holds {} participants but the config says {}",
            pool.len(),
            config.participants
        )));
    }
    let l = config.cohort_size();
    let mut picked = match policy {
        SelectionPolicy::Uniform => {
            let mut indices: Vec<usize> = (0..pool.len()).collect();
            indices.shuffle(&mut rng::stream(config.seed, "select-iid", &[round]));
            indices.truncate(l);
            indices
        }
        SelectionPolicy::Rotating => rotating_selection(config.seed, pool.len(), l, round),
    };
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pool[i].id).collect())
}

/// Without-replacement queue: pop `l` per round, reshuffling a fresh
/// permutation whenever the queue drains. An id popped twice within one
/// round (possible right after a refill) is deferred to the next round,
/// so a cycle of `c` pops still visits every participant exactly once.
fn rotating_selection(seed: u64, count: usize, l: usize, round: u64) -> Vec<usize> {
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut cycle: u64 = 0;
    for r in 0..=round {
        let mut picked: Vec<usize> = Vec::with_capacity(l);
        let mut deferred: Vec<usize> = Vec::new();
        while picked.len() < l {
            if queue.is_empty() {
                let mut ids: Vec<usize> = (0..count).collect();
                ids.shuffle(&mut rng::stream(seed, "select-niid", &[cycle]));
                cycle += 1;
                queue.extend(ids);
            }
            let id = queue.pop_front().expect("queue was just refilled");
            if picked.contains(&id) {
                deferred.push(id);
            } else {
                picked.push(id);
            }
        }
        for id in deferred.into_iter().rev() {
            queue.push_front(id);
        }
        if r == round {
            return picked;
        }
    }
    unreachable!("loop returns at the requested round")
}

/// Everything a local update needs besides the model: the shared sample
/// stores, the frozen depth prior, and the loss weighting.
pub struct TrainingEnvironment<'a, F: Real> {
    pub train: &'a [Sample<F>],
    /// Gold-standard samples every participant evaluates against.
    pub validation: &'a [Sample<F>],
    pub provider: &'a dyn PseudoDepthProvider<F>,
    pub weights: LossWeights,
}

/// One participant's uploaded result.
#[derive(Debug, Clone)]
pub struct ModelUpdate<F: Real> {
    pub depth: ParameterSet<F>,
    pub pose: ParameterSet<F>,
    /// Aggregation weight: the participant's sample count.
    pub weight: u64,
}

/// Local training diagnostics accompanying an update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalReport {
    /// Optimizer steps actually performed this round.
    pub steps: u64,
    /// Mean training loss per local epoch; 0.0 for an epoch with no step.
    pub epoch_train_loss: Vec<f64>,
    /// Gold-standard validation loss after each local epoch.
    pub epoch_val_loss: Vec<f64>,
}

/// Sample-count weighted mean of the updates: each parameter array
/// becomes `sum_c (m_c / m) x_c` with `m = sum_c m_c`, applied to the
/// depth and pose sets independently. The version advances by one.
pub fn fedavg<F: Real>(updates: &[ModelUpdate<F>], version_before: u64) -> Result<GlobalModel<F>> {
    let Some(first) = updates.first() else {
        return Err(Error::invalid("aggregation needs at least one update"));
    };
    let total: u64 = updates.iter().map(|u| u.weight).sum();
    if total == 0 {
        return Err(Error::invalid("aggregation weights sum to zero"));
    }
    for update in &updates[1..] {
        first.depth.compatible_with(&update.depth)?;
        first.pose.compatible_with(&update.pose)?;
    }
    Ok(GlobalModel {
        depth: weighted_mean(updates.iter().map(|u| (&u.depth, u.weight)), total),
        pose: weighted_mean(updates.iter().map(|u| (&u.pose, u.weight)), total),
        version: version_before + 1,
    })
}

fn weighted_mean<'a, F: Real>(
    sets: impl Iterator<Item = (&'a ParameterSet<F>, u64)>,
    total: u64,
) -> ParameterSet<F> {
    let mut out: Option<ParameterSet<F>> = None;
    for (set, weight) in sets {
        let share = F::c(weight as f64 / total as f64);
        match &mut out {
            None => {
                let mut scaled = set.clone();
                for (_, arr) in scaled.iter_mut() {
                    arr.mapv_inplace(|v| v * share);
                }
                out = Some(scaled);
            }
            Some(acc) => {
                for ((_, sum), (_, x)) in acc.iter_mut().zip(set.iter()) {
                    sum.zip_mut_with(x, |s, &v| *s += v * share);
                }
            }
        }
    }
    out.expect("caller checked for at least one update")
}

/// Target and source frames stacked into one `[1 + s, 3, h, w]` batch
/// for a single depth forward pass.
fn stacked_images<F: Real>(sample: &Sample<F>) -> ArrayD<F> {
    let (h, w) = (sample.target.height(), sample.target.width());
    let mut out = Array4::<F>::zeros((1 + sample.sources.len(), 3, h, w));
    out.index_axis_mut(Axis(0), 0).assign(&sample.target.to_chw());
    for (i, source) in sample.sources.iter().enumerate() {
        out.index_axis_mut(Axis(0), i + 1).assign(&source.to_chw());
    }
    out.into_dyn()
}

/// Target/source channel pairs as one `[s, 6, h, w]` pose-network batch.
fn stacked_pairs<F: Real>(sample: &Sample<F>) -> ArrayD<F> {
    let (h, w) = (sample.target.height(), sample.target.width());
    let target = sample.target.to_chw();
    let mut out = Array4::<F>::zeros((sample.sources.len(), 6, h, w));
    for (i, source) in sample.sources.iter().enumerate() {
        out.slice_mut(s![i, 0..3, .., ..]).assign(&target);
        out.slice_mut(s![i, 3..6, .., ..]).assign(&source.to_chw());
    }
    out.into_dyn()
}

/// Builds the full objective of one sample on the given tape: depth for
/// the target and every source in one forward pass, poses for every
/// source pair in another, then the warp-based losses.
fn sample_loss<'t, F: Real>(
    tape: &'t Tape<F>,
    depth_params: &TapeParams<'t, F>,
    pose_params: &TapeParams<'t, F>,
    sample: &Sample<F>,
    provider: &dyn PseudoDepthProvider<F>,
    weights: &LossWeights,
    rng_loss: &mut ChaCha8Rng,
) -> Result<(Var<'t, F>, LossBreakdown)> {
    let (h, w) = (sample.target.height(), sample.target.width());
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid(format!(
            "training images need sides divisible by 4, got {h}x{w}"
        )));
    }
    let images = tape.constant(stacked_images(sample));
    let depths = sigmoid_to_depth_on_tape(depth_net_on_tape(depth_params, images));
    let slice_depth =
        |i: usize| depths.slice_ranges(&[(i, i + 1), (0, h), (0, w)]).reshape(&[h, w]);
    let poses = pose_net_on_tape(pose_params, tape.constant(stacked_pairs(sample)));

    let sources = sample
        .sources
        .iter()
        .enumerate()
        .map(|(i, source)| WarpSource {
            image: tape.constant(source.to_chw()),
            depth: slice_depth(i + 1),
            pose: poses.slice_ranges(&[(i, i + 1), (0, 6)]).reshape(&[6]),
        })
        .collect();
    let on_tape = SelfSupervisionSample {
        target_image: tape.constant(sample.target.to_chw()),
        target_depth: slice_depth(0),
        sources,
        pseudo_depth: provider.pseudo_depth(&sample.target).into_data(),
    };
    self_supervision_loss(&on_tape, &sample.intrinsics, weights, rng_loss)
}

struct EpochOutcome {
    mean_loss: f64,
    steps: u64,
}

/// One pass over a participant's shard: `batches_per_epoch` optimizer
/// steps on the mean per-batch loss. Batch composition and in-loss
/// sampling are keyed by the participant seed and the global epoch
/// index, so a run can be replayed from any round boundary.
#[allow(clippy::too_many_arguments)]
fn run_epoch<F: Real>(
    depth: &mut ParameterSet<F>,
    pose: &mut ParameterSet<F>,
    adam_depth: &mut Adam<F>,
    adam_pose: &mut Adam<F>,
    sample_ids: &[usize],
    participant_seed: u64,
    epoch_global: u64,
    config: &RoundConfig,
    env: &TrainingEnvironment<'_, F>,
    id: usize,
    round: u64,
) -> Result<EpochOutcome> {
    let fail = |reason: String| Error::ParticipantFailure {
        id,
        round: round as usize,
        reason,
    };
    let batches = make_batches(
        sample_ids.len(),
        config.batches_per_epoch,
        config.batch_size,
        &mut rng::stream(participant_seed, "batches", &[epoch_global]),
    )?;
    let mut steps = 0u64;
    let mut loss_sum = 0.0f64;
    for (batch_index, batch) in batches.iter().enumerate() {
        let tape: Tape<F> = Tape::new();
        let depth_tape = TapeParams::trainable(&tape, depth);
        let pose_tape = TapeParams::trainable(&tape, pose);
        let mut rng_loss =
            rng::stream(participant_seed, "loss", &[epoch_global, batch_index as u64]);
        let mut losses: Vec<Var<'_, F>> = Vec::with_capacity(batch.len());
        for &local in batch {
            let sample = &env.train[sample_ids[local]];
            match sample_loss(
                &tape,
                &depth_tape,
                &pose_tape,
                sample,
                env.provider,
                &env.weights,
                &mut rng_loss,
            ) {
                Ok((loss, _)) => losses.push(loss),
                Err(Error::EmptyValidity) => {
                    log::warn!("sample skipped: no valid pixel survived warping");
                }
                Err(Error::NonFinite { context }) => {
                    return Err(fail(format!("non-finite value in {context}")));
                }
                Err(e) => return Err(e),
            }
        }
        if losses.is_empty() {
            log::warn!("batch {batch_index} skipped: every sample had empty validity");
            continue;
        }
        let mean = losses[1..]
            .iter()
            .fold(losses[0], |acc, &l| acc + l)
            .scale(F::c(1.0 / losses.len() as f64));
        let mean_value = mean.scalar_value();
        if !mean_value.is_finite() {
            return Err(fail(format!("non-finite batch loss {mean_value}")));
        }
        let grads = tape.backward(mean);
        adam_depth.step(depth, &depth_tape.gradients(&grads));
        adam_pose.step(pose, &pose_tape.gradients(&grads));
        steps += 1;
        loss_sum += mean_value.f64();
    }
    Ok(EpochOutcome {
        mean_loss: if steps == 0 { 0.0 } else { loss_sum / steps as f64 },
        steps,
    })
}

/// Trains a copy of the global model on one participant's shard for
/// `local_epochs` passes and returns it with its aggregation weight.
/// The global model itself is never touched. A non-finite loss aborts
/// with a participant-failure error so the round can drop this update.
pub fn local_update<F: Real>(
    participant: &mut ParticipantState<F>,
    global: &GlobalModel<F>,
    config: &RoundConfig,
    env: &TrainingEnvironment<'_, F>,
    round: u64,
) -> Result<(ModelUpdate<F>, LocalReport)> {
    let mut depth = global.depth.clone();
    let mut pose = global.pose.clone();
    let mut report = LocalReport {
        steps: 0,
        epoch_train_loss: Vec::new(),
        epoch_val_loss: Vec::new(),
    };
    for epoch in 0..config.local_epochs {
        let epoch_global = round * config.local_epochs + epoch;
        let outcome = run_epoch(
            &mut depth,
            &mut pose,
            &mut participant.adam_depth,
            &mut participant.adam_pose,
            &participant.sample_ids,
            participant.seed,
            epoch_global,
            config,
            env,
            participant.id,
            round,
        )?;
        report.steps += outcome.steps;
        report.epoch_train_loss.push(outcome.mean_loss);
        if !env.validation.is_empty() {
            let (val, _) = validation_losses(&depth, &pose, env, config.seed)?;
            report.epoch_val_loss.push(val);
        }
    }
    Ok((
        ModelUpdate {
            depth,
            pose,
            weight: participant.sample_count() as u64,
        },
        report,
    ))
}

/// Mean gold-standard self-supervision loss of the given parameters.
/// Sample `i` always sees the same sampling stream, so two evaluations
/// of the same parameters agree exactly.
fn validation_losses<F: Real>(
    depth: &ParameterSet<F>,
    pose: &ParameterSet<F>,
    env: &TrainingEnvironment<'_, F>,
    master_seed: u64,
) -> Result<(f64, usize)> {
    if env.validation.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let mut sum = 0.0f64;
    let mut used = 0usize;
    for (i, sample) in env.validation.iter().enumerate() {
        let tape: Tape<F> = Tape::new();
        let depth_tape = TapeParams::frozen(&tape, depth);
        let pose_tape = TapeParams::frozen(&tape, pose);
        let mut rng_val = rng::stream(master_seed, "val-loss", &[i as u64]);
        match sample_loss(
            &tape,
            &depth_tape,
            &pose_tape,
            sample,
            env.provider,
            &env.weights,
            &mut rng_val,
        ) {
            Ok((_, breakdown)) => {
                sum += breakdown.l_self;
                used += 1;
            }
            Err(Error::EmptyValidity) => {
                log::warn!("validation sample {i} skipped: empty validity");
            }
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::Evaluation(
            "every validation sample had empty validity".to_string(),
        ));
    }
    Ok((sum / used as f64, used))
}

/// Depth prediction for one image from bare parameters.
pub fn predict_depth<F: Real>(params: &ParameterSet<F>, image: &ImageFrame<F>) -> Result<Array2<F>> {
    let (h, w) = (image.height(), image.width());
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid(format!(
            "depth prediction needs sides divisible by 4, got {h}x{w}"
        )));
    }
    let tape: Tape<F> = Tape::new();
    let frozen = TapeParams::frozen(&tape, params);
    let input = image.to_chw().insert_axis(Axis(0));
    let sigma = depth_net_on_tape(&frozen, tape.constant(input))
        .value()
        .index_axis_move(Axis(0), 0)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("depth head emits [1, h, w]");
    Ok(sigmoid_to_depth(&sigma)?.into_data())
}

/// Gold-standard evaluation of one parameter pair: mean self-supervision
/// loss plus reference-depth error statistics where ground truth exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub self_loss: f64,
    /// Mean depth errors over validation images with usable ground truth.
    pub depth: Option<DepthMetrics>,
    /// Validation samples that contributed to `self_loss`.
    pub samples_used: usize,
}

pub fn evaluate_model<F: Real>(
    depth: &ParameterSet<F>,
    pose: &ParameterSet<F>,
    env: &TrainingEnvironment<'_, F>,
    master_seed: u64,
) -> Result<ValidationReport> {
    let (self_loss, samples_used) = validation_losses(depth, pose, env, master_seed)?;
    let mut per_image = Vec::new();
    for sample in env.validation {
        let Some(gt) = &sample.ground_truth else {
            continue;
        };
        let pred = predict_depth(depth, &sample.target)?;
        match evaluate_aligned(&pred, gt, EVAL_DEPTH_CAP) {
            Ok(m) => per_image.push(m),
            Err(Error::Evaluation(why)) => {
                log::warn!("depth evaluation skipped for one image: {why}");
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ValidationReport {
        self_loss,
        depth: DepthMetrics::mean(&per_image),
        samples_used,
    })
}

/// Everything recorded about one round, in ledger-ready form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub selected: Vec<usize>,
    /// Optimizer steps each surviving participant performed.
    pub steps: Vec<(usize, u64)>,
    /// Mean training loss of each survivor's final local epoch.
    pub train_loss: Vec<(usize, f64)>,
    /// Gold-standard loss of each survivor after its final local epoch.
    pub local_val_loss: Vec<(usize, f64)>,
    pub failures: Vec<(usize, String)>,
    /// True when every selected participant failed; the global model and
    /// its version are then carried over unchanged.
    pub aborted: bool,
    /// Evaluation of the aggregated model; absent for aborted rounds and
    /// runs without a validation set.
    pub validation: Option<ValidationReport>,
    /// Best gold-standard loss seen so far; non-increasing across rounds.
    pub best_self_loss: Option<f64>,
    /// Worst-case bytes after this many rounds: every participant active.
    pub cumulative_w_max: u64,
    /// Bytes when exactly the configured fraction is active per round.
    pub cumulative_w_min: f64,
    pub cumulative_steps: u64,
}

#[derive(Debug, Default)]
struct RoundDigest {
    steps: Vec<(usize, u64)>,
    train_loss: Vec<(usize, f64)>,
    local_val_loss: Vec<(usize, f64)>,
    failures: Vec<(usize, String)>,
    total_steps: u64,
    aborted: bool,
}

/// Folds the per-participant outcomes of one round into the global
/// model. Participant failures are dropped from the aggregation (the
/// weighted mean renormalizes over the survivors); any other error is a
/// run-level fault. If nobody survived the global model is left alone.
fn apply_round_results<F: Real>(
    global: &mut GlobalModel<F>,
    mut results: Vec<(usize, Result<(ModelUpdate<F>, LocalReport)>)>,
) -> Result<RoundDigest> {
    results.sort_by_key(|(id, _)| *id);
    let mut digest = RoundDigest::default();
    let mut survivors: Vec<ModelUpdate<F>> = Vec::new();
    for (id, outcome) in results {
        match outcome {
            Ok((update, report)) => {
                digest.total_steps += report.steps;
                digest.steps.push((id, report.steps));
                digest
                    .train_loss
                    .push((id, report.epoch_train_loss.last().copied().unwrap_or(0.0)));
                if let Some(&v) = report.epoch_val_loss.last() {
                    digest.local_val_loss.push((id, v));
                }
                survivors.push(update);
            }
            Err(Error::ParticipantFailure { id: failed, reason, .. }) => {
                digest.failures.push((failed, reason));
            }
            Err(e) => return Err(e),
        }
    }
    if survivors.is_empty() {
        digest.aborted = true;
        return Ok(digest);
    }
    *global = fedavg(&survivors, global.version)?;
    Ok(digest)
}

/// Where to pick a run back up, carried over from the last complete
/// round record of an interrupted run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResumePoint {
    /// First round (or epoch, for the pooled baseline) still to run.
    pub next_round: u64,
    pub best_self_loss: Option<f64>,
    pub steps_so_far: u64,
}

/// A finished run: every record produced plus the final model.
pub struct FederationRun<F: Real> {
    pub records: Vec<RoundRecord>,
    pub model: GlobalModel<F>,
}

/// The full round loop: select a cohort, train the members in parallel
/// on snapshots of the global model, aggregate the survivors, evaluate,
/// record. The observer sees each record with the model that produced
/// it, in order, and may persist both; an observer error stops the run.
pub fn run_federation<F: Real>(
    config: &RoundConfig,
    plan: &PartitionPlan,
    env: &TrainingEnvironment<'_, F>,
    initial: GlobalModel<F>,
    policy: SelectionPolicy,
    resume: ResumePoint,
    mut observer: impl FnMut(&RoundRecord, &GlobalModel<F>) -> Result<()>,
) -> Result<FederationRun<F>> {
    config.validate()?;
    if plan.participants() != config.participants {
        return Err(Error::invalid(format!(
            "partition plan has {} participants but the config says {}",
            plan.participants(),
            config.participants
        )));
    }
    plan.validate(env.train.len())?;

    let mut participants: Vec<ParticipantState<F>> = (0..config.participants)
        .map(|id| {
            ParticipantState::new(
                id,
                plan.samples_of(id).to_vec(),
                config.seed,
                config.learning_rate,
            )
        })
        .collect::<Result<_>>()?;
    let model_bytes = initial.transfer_bytes();
    let mut model = initial;
    let mut best = resume.best_self_loss;
    let mut cumulative_steps = resume.steps_so_far;
    let mut records = Vec::new();

    for round in resume.next_round..config.total_rounds {
        let selected = select_participants(config, &participants, round, policy)?;
        let cohort: Vec<&mut ParticipantState<F>> = participants
            .iter_mut()
            .filter(|p| selected.binary_search(&p.id).is_ok())
            .collect();
        let global = &model;
        let results: Vec<(usize, Result<(ModelUpdate<F>, LocalReport)>)> = cohort
            .into_par_iter()
            .map(|p| {
                let id = p.id;
                (id, local_update(p, global, config, env, round))
            })
            .collect();
        let digest = apply_round_results(&mut model, results)?;

        let validation = if digest.aborted || env.validation.is_empty() {
            None
        } else {
            Some(evaluate_model(&model.depth, &model.pose, env, config.seed)?)
        };
        if let Some(v) = &validation {
            best = Some(best.map_or(v.self_loss, |b| b.min(v.self_loss)));
        }
        cumulative_steps += digest.total_steps;
        let rounds_done = round + 1;
        let record = RoundRecord {
            round,
            selected,
            steps: digest.steps,
            train_loss: digest.train_loss,
            local_val_loss: digest.local_val_loss,
            failures: digest.failures,
            aborted: digest.aborted,
            validation,
            best_self_loss: best,
            cumulative_w_max: comm_upper_bound(
                rounds_done,
                config.participants as u64,
                model_bytes,
            ),
            cumulative_w_min: comm_lower_bound(
                rounds_done,
                config.participants as u64,
                config.fraction,
                model_bytes,
            )?,
            cumulative_steps,
        };
        observer(&record, &model)?;
        records.push(record);
    }
    Ok(FederationRun { records, model })
}

/// One epoch of the pooled baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub steps: u64,
    pub train_loss: f64,
    pub validation: Option<ValidationReport>,
    pub best_self_loss: Option<f64>,
    pub cumulative_steps: u64,
}

pub struct CentralizedRun<F: Real> {
    pub records: Vec<EpochRecord>,
    pub model: GlobalModel<F>,
}

/// Pooled baseline: one virtual participant owns every training sample
/// and trains for `total_rounds * local_epochs` epochs. Epoch `g` here
/// reproduces round `g` of a single-participant, full-fraction,
/// one-local-epoch federation exactly, optimizer state included.
pub fn run_centralized<F: Real>(
    config: &RoundConfig,
    env: &TrainingEnvironment<'_, F>,
    initial: GlobalModel<F>,
    resume: ResumePoint,
    mut observer: impl FnMut(&EpochRecord, &GlobalModel<F>) -> Result<()>,
) -> Result<CentralizedRun<F>> {
    config.validate()?;
    if env.train.is_empty() {
        return Err(Error::invalid("the pooled baseline needs training samples"));
    }
    let epochs = config.total_rounds * config.local_epochs;
    let all_ids: Vec<usize> = (0..env.train.len()).collect();
    let mut state = ParticipantState::new(0, all_ids, config.seed, config.learning_rate)?;
    let mut model = initial;
    let mut best = resume.best_self_loss;
    let mut cumulative_steps = resume.steps_so_far;
    let mut records = Vec::new();

    for epoch in resume.next_round..epochs {
        let outcome = run_epoch(
            &mut model.depth,
            &mut model.pose,
            &mut state.adam_depth,
            &mut state.adam_pose,
            &state.sample_ids,
            state.seed,
            epoch,
            config,
            env,
            state.id,
            epoch,
        )?;
        cumulative_steps += outcome.steps;
        let validation = if env.validation.is_empty() {
            None
        } else {
            Some(evaluate_model(&model.depth, &model.pose, env, config.seed)?)
        };
        if let Some(v) = &validation {
            best = Some(best.map_or(v.self_loss, |b| b.min(v.self_loss)));
        }
        let record = EpochRecord {
            epoch,
            steps: outcome.steps,
            train_loss: outcome.mean_loss,
            validation,
            best_self_loss: best,
            cumulative_steps,
        };
        observer(&record, &model)?;
        records.push(record);
    }
    Ok(CentralizedRun { records, model })
}
