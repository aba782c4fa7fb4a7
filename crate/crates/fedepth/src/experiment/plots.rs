//! Plot-ready CSV extraction from finished ledgers: learning curves
//! against steps and rounds, communication cost against rounds, and the
//! per-schedule best-loss table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::Scenario;
use crate::error::{Error, Result};
use crate::metrics::steps_federated;

use super::ledger::RunLedger;
use super::runner::verify_ledger_costs;

/// Where each emitted CSV landed.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotFiles {
    pub loss_vs_steps: PathBuf,
    pub loss_vs_rounds: PathBuf,
    pub cost_vs_rounds: PathBuf,
    pub best_loss_by_schedule: PathBuf,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// A short run label: scenario plus the config hash prefix, enough to
/// tell curves apart in a mixed plot.
fn run_label(scenario: Scenario, hash: &str) -> String {
    format!("{}-{}", scenario, &hash[..hash.len().min(8)])
}

/// Validation self-supervision loss against cumulative optimizer steps,
/// one row per round or epoch.
pub fn loss_vs_steps_csv(ledgers: &[RunLedger]) -> String {
    let mut out = String::from("scenario,run,unit,cumulative_steps,val_self_loss,best_self_loss\n");
    for ledger in ledgers {
        let header = ledger.header();
        let label = run_label(header.scenario, &header.config_hash);
        for r in ledger.rounds() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                header.scenario,
                label,
                r.round,
                r.cumulative_steps,
                fmt_opt(r.validation.as_ref().map(|v| v.self_loss)),
                fmt_opt(r.best_self_loss),
            )
            .expect("writing to a string cannot fail");
        }
        for e in ledger.epochs() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                header.scenario,
                label,
                e.epoch,
                e.cumulative_steps,
                fmt_opt(e.validation.as_ref().map(|v| v.self_loss)),
                fmt_opt(e.best_self_loss),
            )
            .expect("writing to a string cannot fail");
        }
    }
    out
}

/// Validation loss and depth error against the round (or epoch) index.
pub fn loss_vs_rounds_csv(ledgers: &[RunLedger]) -> String {
    let mut out = String::from("scenario,run,unit,val_self_loss,best_self_loss,abs_rel\n");
    for ledger in ledgers {
        let header = ledger.header();
        let label = run_label(header.scenario, &header.config_hash);
        let mut push = |unit: u64,
                        validation: Option<(f64, Option<f64>)>,
                        best: Option<f64>| {
            let (self_loss, abs_rel) = match validation {
                Some((l, a)) => (Some(l), a),
                None => (None, None),
            };
            writeln!(
                out,
                "{},{},{},{},{},{}",
                header.scenario,
                label,
                unit,
                fmt_opt(self_loss),
                fmt_opt(best),
                fmt_opt(abs_rel),
            )
            .expect("writing to a string cannot fail");
        };
        for r in ledger.rounds() {
            push(
                r.round,
                r.validation
                    .as_ref()
                    .map(|v| (v.self_loss, v.depth.map(|d| d.abs_rel))),
                r.best_self_loss,
            );
        }
        for e in ledger.epochs() {
            push(
                e.epoch,
                e.validation
                    .as_ref()
                    .map(|v| (v.self_loss, v.depth.map(|d| d.abs_rel))),
                e.best_self_loss,
            );
        }
    }
    out
}

/// Cumulative communication bounds and steps per round. Pooled runs
/// transfer nothing, so their cost columns stay zero.
pub fn cost_vs_rounds_csv(ledgers: &[RunLedger]) -> String {
    let mut out =
        String::from("scenario,run,unit,cumulative_w_max_bytes,cumulative_w_min_bytes,cumulative_steps\n");
    for ledger in ledgers {
        let header = ledger.header();
        let label = run_label(header.scenario, &header.config_hash);
        for r in ledger.rounds() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                header.scenario,
                label,
                r.round,
                r.cumulative_w_max,
                r.cumulative_w_min,
                r.cumulative_steps,
            )
            .expect("writing to a string cannot fail");
        }
        for e in ledger.epochs() {
            writeln!(
                out,
                "{},{},{},0,0,{}",
                header.scenario, label, e.epoch, e.cumulative_steps,
            )
            .expect("writing to a string cannot fail");
        }
    }
    out
}

/// One row per ledger: the schedule knobs against the best validation
/// loss and the run's total cost.
pub fn best_loss_by_schedule_csv(ledgers: &[RunLedger]) -> String {
    let mut out = String::from(
        "scenario,run,participants,fraction,cohort,local_epochs,best_self_loss,w_max_bytes,w_min_bytes,steps_total\n",
    );
    for ledger in ledgers {
        let header = ledger.header();
        let schedule = &header.config.schedule;
        let label = run_label(header.scenario, &header.config_hash);
        let (best, w_max, w_min, steps) = match ledger.summary() {
            Some(s) => (
                fmt_opt(s.best_self_loss),
                s.cost.w_max.to_string(),
                s.cost.w_min.to_string(),
                s.cost.steps_total.to_string(),
            ),
            None => (String::new(), String::new(), String::new(), String::new()),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            header.scenario,
            label,
            schedule.participants,
            schedule.fraction,
            schedule.fraction.cohort_size(schedule.participants),
            schedule.local_epochs,
            best,
            w_max,
            w_min,
            steps,
        )
        .expect("writing to a string cannot fail");
    }
    out
}

/// Audits every ledger and writes the four CSVs into `out_dir`.
///
/// Besides the per-record cost audit, federated step counts are checked
/// against an independent recomputation from the per-participant step
/// lists; a ledger that cannot pass either check is refused.
pub fn emit_plot_data(ledgers: &[RunLedger], out_dir: &Path) -> Result<PlotFiles> {
    if ledgers.is_empty() {
        return Err(Error::Config("no ledgers to plot".into()));
    }
    for ledger in ledgers {
        ledger.validate()?;
        verify_ledger_costs(ledger)?;
        let per_round: Vec<Vec<(u64, u64)>> = ledger
            .rounds()
            .map(|r| r.steps.iter().map(|&(_, s)| (1, s)).collect())
            .collect();
        let recomputed = steps_federated(&per_round);
        let recorded: u64 = ledger.rounds().map(|r| r.steps.iter().map(|&(_, s)| s).sum::<u64>()).sum();
        if recomputed != recorded {
            return Err(Error::Ledger(format!(
                "{}: federated step recomputation {recomputed} != recorded {recorded}",
                ledger.path.display()
            )));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let files = PlotFiles {
        loss_vs_steps: out_dir.join("loss_vs_steps.csv"),
        loss_vs_rounds: out_dir.join("loss_vs_rounds.csv"),
        cost_vs_rounds: out_dir.join("cost_vs_rounds.csv"),
        best_loss_by_schedule: out_dir.join("best_loss_by_schedule.csv"),
    };
    std::fs::write(&files.loss_vs_steps, loss_vs_steps_csv(ledgers))?;
    std::fs::write(&files.loss_vs_rounds, loss_vs_rounds_csv(ledgers))?;
    std::fs::write(&files.cost_vs_rounds, cost_vs_rounds_csv(ledgers))?;
    std::fs::write(&files.best_loss_by_schedule, best_loss_by_schedule_csv(ledgers))?;
    Ok(files)
}

/// Human-readable closing table for a set of runs, one line per ledger.
pub fn summary_table(ledgers: &[RunLedger]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<24} {:>6} {:>10} {:>14} {:>14} {:>12} {:>10}",
        "run", "units", "steps", "w_max_bytes", "w_min_bytes", "best_loss", "abs_rel"
    )
    .expect("writing to a string cannot fail");
    for ledger in ledgers {
        let header = ledger.header();
        let label = run_label(header.scenario, &header.config_hash);
        let (units, steps, w_max, w_min, best, abs_rel) = match ledger.summary() {
            Some(s) => (
                s.units_completed.to_string(),
                s.cost.steps_total.to_string(),
                s.cost.w_max.to_string(),
                s.cost.w_min.to_string(),
                fmt_opt(s.best_self_loss),
                fmt_opt(
                    s.final_validation
                        .as_ref()
                        .and_then(|v| v.depth.map(|d| d.abs_rel)),
                ),
            ),
            None => (
                "?".into(),
                "?".into(),
                "?".into(),
                "?".into(),
                String::new(),
                String::new(),
            ),
        };
        writeln!(
            out,
            "{label:<24} {units:>6} {steps:>10} {w_max:>14} {w_min:>14} {best:>12} {abs_rel:>10}"
        )
        .expect("writing to a string cannot fail");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SceneSpec, Scenario};
    use crate::experiment::config::{DataConfig, ExperimentConfig};
    use crate::experiment::runner::run_experiment;

    fn run(dir: &Path, scenario: Scenario, seed: u64) -> RunLedger {
        let mut config = ExperimentConfig::default();
        config.scenario = scenario;
        config.out_dir = dir.join(format!("{scenario}-{seed}"));
        config.schedule.participants = if scenario == Scenario::Ct { 1 } else { 2 };
        config.schedule.total_rounds = 2;
        config.schedule.batches_per_epoch = 1;
        config.schedule.batch_size = 1;
        config.schedule.seed = seed;
        config.widths = crate::models::NetworkWidths::new(4, 6, 8);
        config.data = DataConfig::Synthetic {
            scene: SceneSpec {
                width: 16,
                height: 8,
                texture_frequency: 0.15,
                drives: 2,
                frames_per_drive: 5,
                boxes: 0,
                ..SceneSpec::default()
            },
            validation_per_drive: 1,
        };
        run_experiment(&config).unwrap()
    }

    #[test]
    fn one_pooled_ledger_yields_one_row_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = run(dir.path(), Scenario::Ct, 3);
        let files = emit_plot_data(std::slice::from_ref(&ledger), &dir.path().join("plots")).unwrap();
        let text = std::fs::read_to_string(&files.loss_vs_steps).unwrap();
        assert_eq!(text.lines().count(), 1 + 2);
        assert!(text.lines().nth(1).unwrap().starts_with("ct,"));
    }

    #[test]
    fn mixed_ledgers_are_distinguished_by_scenario() {
        let dir = tempfile::tempdir().unwrap();
        let ct = run(dir.path(), Scenario::Ct, 3);
        let ft = run(dir.path(), Scenario::FtIid, 3);
        let files = emit_plot_data(&[ct, ft], &dir.path().join("plots")).unwrap();
        let text = std::fs::read_to_string(&files.loss_vs_rounds).unwrap();
        assert!(text.lines().any(|l| l.starts_with("ct,")));
        assert!(text.lines().any(|l| l.starts_with("ft-iid,")));
        let table = std::fs::read_to_string(&files.best_loss_by_schedule).unwrap();
        assert_eq!(table.lines().count(), 1 + 2);
    }

    #[test]
    fn an_empty_ledger_set_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_plot_data(&[], dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
