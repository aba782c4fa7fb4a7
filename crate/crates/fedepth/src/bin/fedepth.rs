//! Command-line front end for running, resuming, sweeping, and reporting
//! depth-from-motion training experiments. All heavy lifting lives in the
//! library; this binary only parses arguments and prints results.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use fedepth::experiment::{
    emit_plot_data, load_config, resume_experiment, run_ablation_grid, run_experiment,
    summary_table, verify_ledger_costs, GridSpec, Overrides, RunLedger, CONFIG_ENV_VAR,
    LEDGER_FILE,
};
use fedepth::data::Scenario;
use fedepth::metrics::Fraction;

#[derive(Parser)]
#[command(name = "fedepth", version, about = "Self-supervised depth training, pooled or federated")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, env = CONFIG_ENV_VAR, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Training scenario: ct, ft-iid, or ft-niid.
    #[arg(long, value_parser = Scenario::from_str)]
    scenario: Option<Scenario>,

    /// Number of federated participants.
    #[arg(long)]
    participants: Option<usize>,

    /// Fraction of participants selected per round, e.g. 1/2.
    #[arg(long, value_parser = Fraction::from_str)]
    fraction: Option<Fraction>,

    /// Local epochs per participant per round.
    #[arg(long)]
    local_epochs: Option<u64>,

    /// Total rounds (federated) or epochs (pooled).
    #[arg(long)]
    rounds: Option<u64>,

    /// Master seed for data, partition, and training randomness.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory for the ledger and checkpoints.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            scenario: self.scenario,
            participants: self.participants,
            fraction: self.fraction,
            local_epochs: self.local_epochs,
            rounds: self.rounds,
            seed: self.seed,
            out: self.out.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from scratch and write its ledger.
    Run(ConfigArgs),

    /// Continue an interrupted run from its last checkpoint.
    Resume(ConfigArgs),

    /// Sweep participant count, selection fraction, and local epochs.
    Grid {
        #[command(flatten)]
        base: ConfigArgs,

        /// Participant counts to sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        participants_list: Vec<usize>,

        /// Selection fractions to sweep, comma separated, e.g. 1,1/2,1/5.
        #[arg(long, value_delimiter = ',', value_parser = Fraction::from_str)]
        fractions: Vec<Fraction>,

        /// Local epoch counts to sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        epochs_list: Vec<u64>,
    },

    /// Audit finished runs and emit CSV plot data plus a summary table.
    Report {
        /// Run directories, each holding a ledger file.
        #[arg(required = true, value_name = "RUN_DIR")]
        runs: Vec<PathBuf>,

        /// Directory for the CSV files; defaults to the first run directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    match Cli::parse().command.execute() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

impl Command {
    fn execute(self) -> fedepth::Result<()> {
        match self {
            Command::Run(args) => {
                let config = load_config(args.config.as_deref(), &args.overrides())?;
                let ledger = run_experiment(&config)?;
                println!("{}", summary_table(std::slice::from_ref(&ledger)));
                println!("ledger: {}", config.ledger_path().display());
                Ok(())
            }
            Command::Resume(args) => {
                let config = load_config(args.config.as_deref(), &args.overrides())?;
                let ledger = resume_experiment(&config)?;
                println!("{}", summary_table(std::slice::from_ref(&ledger)));
                println!("ledger: {}", config.ledger_path().display());
                Ok(())
            }
            Command::Grid { base, participants_list, fractions, epochs_list } => {
                let config = load_config(base.config.as_deref(), &base.overrides())?;
                let mut grid = GridSpec::singleton(&config);
                if !participants_list.is_empty() {
                    grid.participants = participants_list;
                }
                if !fractions.is_empty() {
                    grid.fractions = fractions;
                }
                if !epochs_list.is_empty() {
                    grid.local_epochs = epochs_list;
                }
                let cells = run_ablation_grid(&config, &grid)?;
                let failed = cells.iter().filter(|c| c.error.is_some()).count();
                println!("{} cells, {} failed", cells.len(), failed);
                for cell in cells.iter().filter(|c| c.error.is_some()) {
                    println!(
                        "  c={} f={} e={}: {}",
                        cell.participants,
                        cell.fraction,
                        cell.local_epochs,
                        cell.error.as_deref().unwrap_or_default()
                    );
                }
                println!("grid summary: {}", config.out_dir.join("grid-summary.csv").display());
                Ok(())
            }
            Command::Report { runs, out } => {
                let mut ledgers = Vec::with_capacity(runs.len());
                for dir in &runs {
                    let ledger = RunLedger::read(&dir.join(LEDGER_FILE))?;
                    verify_ledger_costs(&ledger)?;
                    ledgers.push(ledger);
                }
                let out_dir = out.unwrap_or_else(|| runs[0].clone());
                let files = emit_plot_data(&ledgers, &out_dir)?;
                println!("{}", summary_table(&ledgers));
                println!("wrote {}", files.loss_vs_steps.display());
                println!("wrote {}", files.loss_vs_rounds.display());
                println!("wrote {}", files.cost_vs_rounds.display());
                println!("wrote {}", files.best_loss_by_schedule.display());
                Ok(())
            }
        }
    }
}
