//! Federated training over drive-grouped shards. Each participant owns
//! the frames of its own recordings (the realistic, non-uniform case),
//! trains locally for one epoch per round, and uploads parameters for
//! sample-weighted averaging. The ledger records who was selected, what
//! each upload cost, and how the shared model scores on held-out frames.

use fedepth::data::{SceneSpec, Scenario};
use fedepth::experiment::{run_experiment, summary_table, DataConfig, ExperimentConfig};
use fedepth::metrics::Fraction;

fn main() -> fedepth::Result<()> {
    let mut config = ExperimentConfig {
        scenario: Scenario::FtNiid,
        out_dir: std::env::temp_dir().join("fedepth-federated"),
        ..ExperimentConfig::default()
    };
    config.schedule.participants = 4;
    config.schedule.fraction = Fraction::new(1, 2)?;
    config.schedule.local_epochs = 1;
    config.schedule.total_rounds = 4;
    config.schedule.batches_per_epoch = 4;
    config.schedule.batch_size = 2;
    config.schedule.learning_rate = 2e-3;
    config.schedule.seed = 23;
    config.data = DataConfig::Synthetic {
        scene: SceneSpec {
            width: 32,
            height: 16,
            drives: 4,
            frames_per_drive: 6,
            boxes: 1,
            ..SceneSpec::default()
        },
        validation_per_drive: 1,
    };

    let _ = std::fs::remove_dir_all(&config.out_dir);

    let ledger = run_experiment(&config)?;
    for round in ledger.rounds() {
        let val = round.validation.as_ref().map_or(f64::NAN, |v| v.self_loss);
        println!(
            "round {}: cohort {:?}, validation {:.5}, at most {} B sent so far",
            round.round, round.selected, val, round.cumulative_w_max
        );
    }
    println!();
    println!("{}", summary_table(std::slice::from_ref(&ledger)));
    Ok(())
}
