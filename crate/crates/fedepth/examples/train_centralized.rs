//! Pooled-baseline training end to end: a small rendered scene, a few
//! epochs of optimization, and a ledger on disk with one line per epoch.
//! The run is fully reproducible from its config and seed.

use fedepth::data::{SceneSpec, Scenario};
use fedepth::experiment::{run_experiment, summary_table, DataConfig, ExperimentConfig};

fn main() -> fedepth::Result<()> {
    let mut config = ExperimentConfig {
        scenario: Scenario::Ct,
        out_dir: std::env::temp_dir().join("fedepth-centralized"),
        ..ExperimentConfig::default()
    };
    config.schedule.participants = 1;
    config.schedule.total_rounds = 3;
    config.schedule.batches_per_epoch = 8;
    config.schedule.batch_size = 2;
    config.schedule.learning_rate = 2e-3;
    config.schedule.seed = 17;
    config.data = DataConfig::Synthetic {
        scene: SceneSpec {
            width: 32,
            height: 16,
            drives: 2,
            frames_per_drive: 6,
            boxes: 1,
            ..SceneSpec::default()
        },
        validation_per_drive: 1,
    };

    // A rerun of a finished config fails on the existing ledger; clear it.
    let _ = std::fs::remove_dir_all(&config.out_dir);

    let ledger = run_experiment(&config)?;
    for epoch in ledger.epochs() {
        println!(
            "epoch {}: train {:.5}, validation {:.5}",
            epoch.epoch,
            epoch.train_loss,
            epoch.validation.as_ref().map_or(f64::NAN, |v| v.self_loss)
        );
    }
    println!();
    println!("{}", summary_table(std::slice::from_ref(&ledger)));
    println!("ledger at {}", config.ledger_path().display());
    Ok(())
}
