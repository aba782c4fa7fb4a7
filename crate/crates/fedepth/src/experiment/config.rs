//! Experiment settings: file format, command-line overrides, validation,
//! and the content hash that stamps every persisted record.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{LoaderConfig, SceneSpec, Scenario};
use crate::error::{Error, Result};
use crate::federation::RoundConfig;
use crate::losses::LossWeights;
use crate::metrics::Fraction;
use crate::models::NetworkWidths;
use crate::rng;

/// Environment variable consulted for the settings file path when the
/// command line does not name one.
pub const CONFIG_ENV_VAR: &str = "FEDEPTH_CONFIG";

/// Name of the record stream inside an experiment's output directory.
pub const LEDGER_FILE: &str = "ledger.jsonl";

/// Subdirectory of an experiment's output directory holding model state.
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Where the training frames come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Rendered scenes; fully reproducible from the seed.
    Synthetic {
        #[serde(default)]
        scene: SceneSpec,
        /// Samples held out from the tail of every drive for validation.
        #[serde(default = "default_holdout")]
        validation_per_drive: usize,
    },
    /// The KITTI directory layout, resized at load time.
    Kitti {
        root: PathBuf,
        /// Split file listing training frames, one `drive index` per line.
        train_split: PathBuf,
        /// Optional split file for the held-out evaluation frames.
        #[serde(default)]
        validation_split: Option<PathBuf>,
        #[serde(default)]
        loader: LoaderConfig,
    },
}

fn default_holdout() -> usize {
    1
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            scene: SceneSpec::default(),
            validation_per_drive: default_holdout(),
        }
    }
}

/// Everything one run needs, in file form: a TOML document with one
/// section per concern. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Ledger, checkpoints, and plot data land here.
    pub out_dir: PathBuf,
    pub schedule: RoundConfig,
    pub widths: NetworkWidths,
    pub weights: LossWeights,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::Ct,
            out_dir: PathBuf::from("runs/experiment"),
            schedule: RoundConfig::default(),
            widths: NetworkWidths::default(),
            weights: LossWeights::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Static coherence checks, run before any data is touched.
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate().map_err(config_error)?;
        if self.scenario == Scenario::Ct && self.schedule.participants != 1 {
            return Err(Error::Config(format!(
                "the pooled scenario trains one virtual participant, not {}",
                self.schedule.participants
            )));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("output directory must be set".into()));
        }
        let (w, h) = match &self.data {
            DataConfig::Synthetic { scene, .. } => (scene.width, scene.height),
            DataConfig::Kitti { loader, .. } => (loader.width, loader.height),
        };
        if w == 0 || h == 0 || w % 4 != 0 || h % 4 != 0 {
            return Err(Error::Config(format!(
                "frame size {w}x{h} must be positive and divisible by 4"
            )));
        }
        if let DataConfig::Synthetic { scene, .. } = &self.data {
            if scene.drives == 0 || scene.frames_per_drive < 3 {
                return Err(Error::Config(
                    "a rendered dataset needs at least one drive of three frames".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.out_dir.join(LEDGER_FILE)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join(CHECKPOINT_DIR)
    }
}

fn config_error(e: Error) -> Error {
    Error::Config(e.to_string())
}

/// Fingerprint of the computation a config describes. The output
/// directory is excluded on purpose: the same experiment written to two
/// places is still the same experiment.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let mut canonical = config.clone();
    canonical.out_dir = PathBuf::new();
    let bytes = serde_json::to_vec(&canonical).expect("config serializes");
    format!("{:016x}", rng::stable_hash(&[&bytes]))
}

/// Command-line values that take precedence over the settings file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scenario: Option<Scenario>,
    pub participants: Option<usize>,
    pub fraction: Option<Fraction>,
    pub local_epochs: Option<u64>,
    pub rounds: Option<u64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(s) = self.scenario {
            config.scenario = s;
        }
        if let Some(c) = self.participants {
            config.schedule.participants = c;
        }
        if let Some(f) = self.fraction {
            config.schedule.fraction = f;
        }
        if let Some(e) = self.local_epochs {
            config.schedule.local_epochs = e;
        }
        if let Some(t) = self.rounds {
            config.schedule.total_rounds = t;
        }
        if let Some(s) = self.seed {
            config.schedule.seed = s;
        }
        if let Some(o) = &self.out {
            config.out_dir = o.clone();
        }
    }
}

/// Reads the settings file (when given), layers the overrides on top,
/// and validates the result. With no file, overrides apply to defaults.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read settings file {}: {e}", p.display()))
            })?;
            toml::from_str::<ExperimentConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    overrides.apply(&mut config);
    config.validate()?;
    Ok(config)
}
