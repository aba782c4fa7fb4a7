//! The schedule ablation: rerun one base experiment over a cartesian
//! grid of participant counts, fractions, and local epoch counts, and
//! tabulate what each combination bought and what it cost.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::Scenario;
use crate::error::{Error, Result};
use crate::metrics::Fraction;

use super::config::ExperimentConfig;
use super::runner::run_experiment;

/// Value lists for the three swept schedule knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub participants: Vec<usize>,
    pub fractions: Vec<Fraction>,
    pub local_epochs: Vec<u64>,
}

impl GridSpec {
    /// A single-cell grid holding the base schedule's values.
    pub fn singleton(config: &ExperimentConfig) -> Self {
        GridSpec {
            participants: vec![config.schedule.participants],
            fractions: vec![config.schedule.fraction],
            local_epochs: vec![config.schedule.local_epochs],
        }
    }

    pub fn cells(&self) -> usize {
        self.participants.len() * self.fractions.len() * self.local_epochs.len()
    }
}

/// Outcome of one grid combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub participants: usize,
    pub fraction: Fraction,
    pub local_epochs: u64,
    /// Participants active per round, the product the x-axis of the
    /// summary plots uses.
    pub cohort: usize,
    pub out_dir: PathBuf,
    pub best_self_loss: Option<f64>,
    pub w_max_bytes: u64,
    pub w_min_bytes: f64,
    pub steps_total: u64,
    /// Why this combination produced no result, when it failed.
    pub error: Option<String>,
}

/// Directory name for one combination, filesystem-safe.
fn cell_dir_name(c: usize, f: Fraction, e: u64) -> String {
    format!("c{}-f{}of{}-e{}", c, f.num(), f.den(), e)
}

/// Runs every combination, one experiment per cell, continuing past
/// failed cells. Results land under the base output directory along
/// with a `grid-summary.csv` (one row per combination).
pub fn run_ablation_grid(base: &ExperimentConfig, grid: &GridSpec) -> Result<Vec<GridCell>> {
    if base.scenario == Scenario::Ct {
        return Err(Error::Config(
            "the schedule ablation varies federated knobs; pick a federated scenario".into(),
        ));
    }
    if grid.cells() == 0 {
        return Err(Error::Config("the grid has no combinations".into()));
    }
    let mut cells = Vec::with_capacity(grid.cells());
    for &c in &grid.participants {
        for &f in &grid.fractions {
            for &e in &grid.local_epochs {
                let mut config = base.clone();
                config.schedule.participants = c;
                config.schedule.fraction = f;
                config.schedule.local_epochs = e;
                config.out_dir = base.out_dir.join(cell_dir_name(c, f, e));
                let mut cell = GridCell {
                    participants: c,
                    fraction: f,
                    local_epochs: e,
                    cohort: f.cohort_size(c),
                    out_dir: config.out_dir.clone(),
                    best_self_loss: None,
                    w_max_bytes: 0,
                    w_min_bytes: 0.0,
                    steps_total: 0,
                    error: None,
                };
                match run_experiment(&config) {
                    Ok(ledger) => {
                        let summary = ledger.summary().expect("completed runs end in a summary");
                        cell.best_self_loss = summary.best_self_loss;
                        cell.w_max_bytes = summary.cost.w_max;
                        cell.w_min_bytes = summary.cost.w_min;
                        cell.steps_total = summary.cost.steps_total;
                    }
                    Err(err) => {
                        log::error!("grid cell {} failed: {err}", cell_dir_name(c, f, e));
                        cell.error = Some(err.to_string());
                    }
                }
                cells.push(cell);
            }
        }
    }
    std::fs::create_dir_all(&base.out_dir)?;
    std::fs::write(base.out_dir.join("grid-summary.csv"), grid_summary_csv(&cells))?;
    Ok(cells)
}

/// One row per combination; empty numeric fields mean the cell failed.
pub fn grid_summary_csv(cells: &[GridCell]) -> String {
    let mut out = String::from(
        "participants,fraction,cohort,local_epochs,best_self_loss,w_max_bytes,w_min_bytes,steps_total,out_dir,error\n",
    );
    for cell in cells {
        let best = cell
            .best_self_loss
            .map(|v| v.to_string())
            .unwrap_or_default();
        let (w_max, w_min, steps) = if cell.error.is_none() {
            (
                cell.w_max_bytes.to_string(),
                cell.w_min_bytes.to_string(),
                cell.steps_total.to_string(),
            )
        } else {
            (String::new(), String::new(), String::new())
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            cell.participants,
            cell.fraction,
            cell.cohort,
            cell.local_epochs,
            best,
            w_max,
            w_min,
            steps,
            cell.out_dir.display(),
            cell.error.as_deref().unwrap_or_default().replace(',', ";"),
        )
        .expect("writing to a string cannot fail");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SceneSpec;
    use crate::experiment::config::DataConfig;
    use crate::experiment::ledger::RunLedger;

    fn grid_base(dir: &std::path::Path) -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        config.scenario = Scenario::FtIid;
        config.out_dir = dir.to_path_buf();
        config.schedule.total_rounds = 1;
        config.schedule.batches_per_epoch = 1;
        config.schedule.batch_size = 1;
        config.schedule.seed = 9;
        config.widths = crate::models::NetworkWidths::new(4, 6, 8);
        config.data = DataConfig::Synthetic {
            scene: SceneSpec {
                width: 16,
                height: 8,
                texture_frequency: 0.15,
                drives: 3,
                frames_per_drive: 5,
                boxes: 0,
                ..SceneSpec::default()
            },
            validation_per_drive: 1,
        };
        config
    }

    #[test]
    fn the_full_grid_produces_one_ledger_per_combination() {
        let dir = tempfile::tempdir().unwrap();
        let base = grid_base(dir.path());
        let grid = GridSpec {
            participants: vec![2, 3],
            fractions: vec![
                Fraction::one(),
                Fraction::new(1, 2).unwrap(),
                Fraction::new(1, 3).unwrap(),
            ],
            local_epochs: vec![1, 2, 3],
        };
        let cells = run_ablation_grid(&base, &grid).unwrap();
        assert_eq!(cells.len(), 18);
        for cell in &cells {
            assert!(cell.error.is_none(), "{:?}", cell.error);
            let ledger = RunLedger::read(&cell.out_dir.join("ledger.jsonl")).unwrap();
            assert!(ledger.summary().is_some());
            assert_eq!(
                ledger.header().config.schedule.local_epochs,
                cell.local_epochs
            );
        }
        let csv = std::fs::read_to_string(dir.path().join("grid-summary.csv")).unwrap();
        assert_eq!(csv.lines().count(), 19);
    }

    #[test]
    fn a_failing_cell_is_recorded_and_the_grid_continues() {
        let dir = tempfile::tempdir().unwrap();
        let base = grid_base(dir.path());
        let grid = GridSpec {
            // Twenty participants cannot each get a sample from the tiny
            // training set, so that cell fails while the other succeeds.
            participants: vec![20, 2],
            fractions: vec![Fraction::one()],
            local_epochs: vec![1],
        };
        let cells = run_ablation_grid(&base, &grid).unwrap();
        assert_eq!(cells.len(), 2);
        assert!(cells[0].error.is_some());
        assert!(cells[1].error.is_none());
    }

    #[test]
    fn pooled_baselines_cannot_be_ablated() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = grid_base(dir.path());
        base.scenario = Scenario::Ct;
        base.schedule.participants = 1;
        let err = run_ablation_grid(&base, &GridSpec::singleton(&base)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
