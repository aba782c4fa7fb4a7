//! End-to-end experiment execution: load data, train under the chosen
//! scenario, stream records to the ledger, checkpoint every unit, and
//! close with a summary. Interrupted runs pick up from the last record.

use std::fs;

use indexmap::IndexMap;

use crate::data::{
    generate_synthetic_scene, load_kitti_layout, partition_iid, partition_niid, PartitionPlan,
    Sample, Scenario,
};
use crate::error::{Error, Result};
use crate::federation::{
    run_centralized, run_federation, GlobalModel, ResumePoint, SelectionPolicy,
    TrainingEnvironment,
};
use crate::metrics::{comm_lower_bound, comm_upper_bound, CostReport};
use crate::models::GroundPlanePrior;
use crate::rng;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{config_hash, DataConfig, ExperimentConfig};
use super::ledger::{
    EpochEntry, HeaderRecord, LedgerRecord, LedgerWriter, RoundEntry, RunLedger, SummaryRecord,
};

/// Training and held-out samples, ready for a run.
pub struct PreparedData {
    pub train: Vec<Sample<f32>>,
    pub validation: Vec<Sample<f32>>,
}

/// Materializes the configured dataset. Rendered data is a pure function
/// of the master seed; disk data must be reachable.
pub fn load_dataset(config: &ExperimentConfig) -> Result<PreparedData> {
    let data = match &config.data {
        DataConfig::Synthetic {
            scene,
            validation_per_drive,
        } => {
            let seed = rng::derive_seed(config.schedule.seed, "scene", &[]);
            let samples = generate_synthetic_scene::<f32>(scene, seed)?;
            let (train, validation) = split_tail_per_drive(samples, *validation_per_drive);
            PreparedData { train, validation }
        }
        DataConfig::Kitti {
            root,
            train_split,
            validation_split,
            loader,
        } => {
            let train = load_kitti_layout::<f32>(root, train_split, loader)?;
            let validation = match validation_split {
                Some(split) => load_kitti_layout::<f32>(root, split, loader)?,
                None => Vec::new(),
            };
            PreparedData { train, validation }
        }
    };
    if data.train.is_empty() {
        return Err(Error::Config(
            "the configured dataset yields no training samples".into(),
        ));
    }
    Ok(data)
}

/// Splits off the last `per_drive` samples of every drive as the
/// validation set, preserving order on both sides.
fn split_tail_per_drive(
    samples: Vec<Sample<f32>>,
    per_drive: usize,
) -> (Vec<Sample<f32>>, Vec<Sample<f32>>) {
    let mut remaining: IndexMap<String, usize> = IndexMap::new();
    for s in samples.iter().rev() {
        let held = remaining.entry(s.drive_id.clone()).or_insert(0);
        *held += 1;
    }
    // Walk forward counting down per drive; a sample is validation when
    // it is among the last `per_drive` of its drive.
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for s in samples {
        let left = remaining
            .get_mut(&s.drive_id)
            .expect("drive counted above");
        *left -= 1;
        if *left < per_drive {
            validation.push(s);
        } else {
            train.push(s);
        }
    }
    (train, validation)
}

/// The shard layout for federated scenarios; the pooled baseline has none.
pub fn build_plan(
    config: &ExperimentConfig,
    data: &PreparedData,
) -> Result<Option<PartitionPlan>> {
    let seed = rng::derive_seed(config.schedule.seed, "partition", &[]);
    match config.scenario {
        Scenario::Ct => Ok(None),
        Scenario::FtIid => Ok(Some(partition_iid(
            data.train.len(),
            config.schedule.participants,
            seed,
        )?)),
        Scenario::FtNiid => {
            let drives: Vec<String> = data.train.iter().map(|s| s.drive_id.clone()).collect();
            Ok(Some(partition_niid(
                &drives,
                config.schedule.participants,
                seed,
            )?))
        }
    }
}

/// Runs the experiment from scratch, replacing any previous output, and
/// returns the completed ledger.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunLedger> {
    config.validate()?;
    let hash = config_hash(config);
    let data = load_dataset(config)?;
    let plan = build_plan(config, &data)?;
    let model = GlobalModel::<f32>::init(config.widths, config.schedule.seed);

    fs::create_dir_all(&config.out_dir)?;
    let mut writer = LedgerWriter::create(&config.ledger_path())?;
    writer.write(&LedgerRecord::Header(HeaderRecord {
        config_hash: hash.clone(),
        scenario: config.scenario,
        config: config.clone(),
        model_bytes: model.transfer_bytes(),
        train_samples: data.train.len(),
        validation_samples: data.validation.len(),
        participant_counts: match &plan {
            Some(p) => p.counts(),
            None => vec![data.train.len()],
        },
    }))?;
    train(
        config,
        &hash,
        &data,
        plan,
        model,
        ResumePoint::default(),
        &mut writer,
    )?;
    finalize(config, &hash, &mut writer)
}

/// Continues an interrupted run from its last ledger record and matching
/// checkpoint. Completing records are appended to the existing ledger.
///
/// Local optimizer moments are not checkpointed, so they restart at zero
/// here; a resumed run can differ from an uninterrupted one from the
/// first resumed update onward.
pub fn resume_experiment(config: &ExperimentConfig) -> Result<RunLedger> {
    config.validate()?;
    let hash = config_hash(config);
    let existing = RunLedger::read(&config.ledger_path())?;
    if existing.header().config_hash != hash {
        return Err(Error::Config(format!(
            "the ledger in {} belongs to experiment {}, not {}",
            config.out_dir.display(),
            existing.header().config_hash,
            hash
        )));
    }
    if existing.summary().is_some() {
        return Err(Error::Config(
            "the run is already complete; nothing to resume".into(),
        ));
    }
    let data = load_dataset(config)?;
    let plan = build_plan(config, &data)?;
    let (resume, model) = match existing.last_unit() {
        Some((unit, steps, best)) => {
            let (_, model) =
                load_checkpoint::<f32>(&config.checkpoint_dir(), &hash, unit)?;
            (
                ResumePoint {
                    next_round: unit + 1,
                    best_self_loss: best,
                    steps_so_far: steps,
                },
                model,
            )
        }
        None => (
            ResumePoint::default(),
            GlobalModel::<f32>::init(config.widths, config.schedule.seed),
        ),
    };
    let mut writer = LedgerWriter::append(&config.ledger_path())?;
    train(config, &hash, &data, plan, model, resume, &mut writer)?;
    finalize(config, &hash, &mut writer)
}

/// The training loop behind both entry points. Each completed unit is
/// checkpointed before its record is written, so the last ledger record
/// always has a loadable checkpoint.
fn train(
    config: &ExperimentConfig,
    hash: &str,
    data: &PreparedData,
    plan: Option<PartitionPlan>,
    model: GlobalModel<f32>,
    resume: ResumePoint,
    writer: &mut LedgerWriter,
) -> Result<()> {
    let provider = GroundPlanePrior::new(data.train[0].intrinsics);
    let env = TrainingEnvironment {
        train: &data.train,
        validation: &data.validation,
        provider: &provider,
        weights: config.weights,
    };
    let checkpoints = config.checkpoint_dir();
    match config.scenario {
        Scenario::Ct => {
            run_centralized(&config.schedule, &env, model, resume, |record, m| {
                save_checkpoint(&checkpoints, hash, config.widths, m, record.epoch)?;
                writer.write(&LedgerRecord::Epoch(EpochEntry {
                    config_hash: hash.to_string(),
                    epoch: record.clone(),
                }))
            })?;
        }
        scenario => {
            let plan = plan.ok_or_else(|| {
                Error::Config("federated scenarios need a partition plan".into())
            })?;
            run_federation(
                &config.schedule,
                &plan,
                &env,
                model,
                SelectionPolicy::for_scenario(scenario),
                resume,
                |record, m| {
                    save_checkpoint(&checkpoints, hash, config.widths, m, record.round)?;
                    writer.write(&LedgerRecord::Round(RoundEntry {
                        config_hash: hash.to_string(),
                        round: record.clone(),
                    }))
                },
            )?;
        }
    }
    Ok(())
}

/// Reads everything written so far, derives the closing totals, and
/// appends the summary record.
fn finalize(config: &ExperimentConfig, hash: &str, writer: &mut LedgerWriter) -> Result<RunLedger> {
    let partial = RunLedger::read(&config.ledger_path())?;
    let summary = build_summary(config, hash, &partial)?;
    writer.write(&LedgerRecord::Summary(summary))?;
    RunLedger::read(&config.ledger_path())
}

fn build_summary(
    config: &ExperimentConfig,
    hash: &str,
    ledger: &RunLedger,
) -> Result<SummaryRecord> {
    let header = ledger.header();
    let mut steps_per_participant: IndexMap<usize, u64> = IndexMap::new();
    let mut steps_total = 0u64;
    let mut units = 0u64;
    let mut final_validation = None;
    for record in ledger.rounds() {
        units += 1;
        for &(id, steps) in &record.steps {
            *steps_per_participant.entry(id).or_insert(0) += steps;
            steps_total += steps;
        }
        final_validation = record.validation.clone();
    }
    for record in ledger.epochs() {
        units += 1;
        *steps_per_participant.entry(0).or_insert(0) += record.steps;
        steps_total += record.steps;
        final_validation = record.validation.clone();
    }
    if let Some((_, cumulative, _)) = ledger.last_unit() {
        if cumulative != steps_total {
            return Err(Error::Ledger(format!(
                "records sum to {steps_total} steps but the last record claims {cumulative}"
            )));
        }
    }
    steps_per_participant.sort_keys();

    let cost = match config.scenario {
        // The pooled baseline never transfers parameters.
        Scenario::Ct => CostReport {
            w_max: 0,
            w_min: 0.0,
            per_participant_per_round: 0,
            steps_total,
            steps_per_participant,
        },
        _ => {
            let mut cost = CostReport::for_config(
                config.schedule.total_rounds,
                config.schedule.participants as u64,
                config.schedule.fraction,
                header.model_bytes,
            )?;
            cost.steps_total = steps_total;
            cost.steps_per_participant = steps_per_participant;
            cost
        }
    };
    Ok(SummaryRecord {
        config_hash: hash.to_string(),
        cost,
        best_self_loss: ledger.last_unit().and_then(|(_, _, best)| best),
        final_validation,
        units_completed: units,
    })
}

/// Recomputes every cumulative cost and step field of a ledger from its
/// own records and the cost formulas; any disagreement is an error. Zero
/// tolerance: the stored numbers must be the recomputation, exactly.
pub fn verify_ledger_costs(ledger: &RunLedger) -> Result<()> {
    let header = ledger.header();
    let schedule = &header.config.schedule;
    let mut steps = 0u64;
    for record in ledger.rounds() {
        steps += record.steps.iter().map(|&(_, s)| s).sum::<u64>();
        let rounds_done = record.round + 1;
        let w_max = comm_upper_bound(
            rounds_done,
            schedule.participants as u64,
            header.model_bytes,
        );
        let w_min = comm_lower_bound(
            rounds_done,
            schedule.participants as u64,
            schedule.fraction,
            header.model_bytes,
        )?;
        if record.cumulative_w_max != w_max
            || record.cumulative_w_min != w_min
            || record.cumulative_steps != steps
        {
            return Err(Error::Ledger(format!(
                "round {}: stored cost ({}, {}, {}) != recomputed ({}, {}, {})",
                record.round,
                record.cumulative_w_max,
                record.cumulative_w_min,
                record.cumulative_steps,
                w_max,
                w_min,
                steps
            )));
        }
    }
    for record in ledger.epochs() {
        steps += record.steps;
        if record.cumulative_steps != steps {
            return Err(Error::Ledger(format!(
                "epoch {}: stored {} cumulative steps, recomputed {}",
                record.epoch, record.cumulative_steps, steps
            )));
        }
    }
    if let Some(summary) = ledger.summary() {
        if summary.cost.steps_total != steps {
            return Err(Error::Ledger(format!(
                "summary claims {} steps, records sum to {steps}",
                summary.cost.steps_total
            )));
        }
    }
    Ok(())
}
