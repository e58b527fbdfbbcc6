//! Run configuration: every hyperparameter with its default, two built-in
//! profiles, TOML loading with partial overrides, and the run manifest.
//!
//! The zero-flag `paper` profile reproduces the reference setup: vocabulary
//! of 1000 words, 80k/10k/10k sentence splits, a 2-layer LSTM with 256
//! hidden units, SGD at learning rate 1.0 with gradient clipping at 1.0,
//! batches of 1024 sentences, learning rate multiplied by 0.1 on validation
//! plateaus. The `ci` profile shrinks the world and the model so the whole
//! pipeline runs in minutes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SplitSizes;
use crate::error::{Error, Result};
use crate::pipeline::{ExperimentSettings, PhasePlan, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Ci,
}

impl std::str::FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Profile::Paper),
            "ci" => Ok(Profile::Ci),
            other => Err(format!("unknown profile {other:?} (expected paper or ci)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Determines the trigram world (the xi table and everything derived).
    pub world: u64,
    /// Drives corpus sampling, parameter initialization and batch shuffling.
    pub run: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSection {
    pub vocab_size: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSection {
    pub train_sentences: usize,
    pub valid_sentences: usize,
    pub test_sentences: usize,
}

impl CorpusSection {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train_sentences,
            valid: self.valid_sentences,
            test: self.test_sentences,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeArmSection {
    pub epochs: usize,
}

/// The complete resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub seeds: Seeds,
    pub world: WorldSection,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train_lm: TrainConfig,
    pub train_disc: TrainConfig,
    pub finetune: TrainConfig,
    pub finetune_ce: CeArmSection,
    pub experiment: ExperimentSettings,
}

fn paper_schedule(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 1.0,
        clip: 1.0,
        batch_size: 1024,
        plateau_decay: 0.1,
        plateau_min_rel_improve: 0.001,
        max_epochs,
        stop_lr: 1e-4,
        fixed_lr: false,
    }
}

impl Config {
    pub fn paper() -> Self {
        Config {
            seeds: Seeds { world: 20180817, run: 1 },
            world: WorldSection { vocab_size: 1000, gamma: crate::corpus::GAMMA },
            corpus: CorpusSection {
                train_sentences: 80_000,
                valid_sentences: 10_000,
                test_sentences: 10_000,
            },
            model: ModelSection { hidden: 256 },
            train_lm: paper_schedule(100),
            train_disc: paper_schedule(100),
            // fine-tuning watches for tiny per-epoch gains, so any strict
            // improvement keeps the learning rate alive
            finetune: TrainConfig { plateau_min_rel_improve: 0.0, ..paper_schedule(100) },
            finetune_ce: CeArmSection { epochs: 0 },
            experiment: ExperimentSettings {
                chosen_rank: 60,
                perturb_value: -20.0,
                watched_count: 3,
                ce_small_lr: 0.01,
                ce_large_lr: 0.1,
            },
        }
    }

    /// Reduced profile for fast runs: a 200-word world, 20k/2k/2k splits and
    /// a 64-unit model.
    pub fn ci() -> Self {
        let mut config = Config::paper();
        config.world.vocab_size = 200;
        config.corpus = CorpusSection {
            train_sentences: 20_000,
            valid_sentences: 2_000,
            test_sentences: 2_000,
        };
        config.model.hidden = 48;
        config.train_lm.max_epochs = 15;
        config.train_disc.max_epochs = 12;
        config.finetune.max_epochs = 8;
        config
    }

    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Config::paper(),
            Profile::Ci => Config::ci(),
        }
    }

    /// Start from a profile and overlay a partial TOML file: any key present
    /// in the file replaces the profile value, table by table.
    pub fn load(profile: Profile, path: Option<&Path>) -> Result<Config> {
        let base = Config::profile(profile);
        let Some(path) = path else { return Ok(base) };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let user: toml::Value = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut tree = toml::Value::try_from(&base)
            .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
        merge_toml(&mut tree, user);
        let merged = toml::to_string(&tree)
            .map_err(|e| Error::Config(format!("serializing merged config: {e}")))?;
        let config: Config = toml::from_str(&merged)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.world.gamma != crate::corpus::GAMMA {
            return Err(Error::Config(format!(
                "gamma is fixed at {}, got {}",
                crate::corpus::GAMMA,
                self.world.gamma
            )));
        }
        if self.world.vocab_size < 160 {
            return Err(Error::Config(
                "vocab_size must be at least 160 so the word classes are non-empty".into(),
            ));
        }
        if self.corpus.train_sentences == 0
            || self.corpus.valid_sentences == 0
            || self.corpus.test_sentences == 0
        {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        if self.model.hidden == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        for (name, phase) in [
            ("train_lm", &self.train_lm),
            ("train_disc", &self.train_disc),
            ("finetune", &self.finetune),
        ] {
            if phase.lr <= 0.0 || phase.clip <= 0.0 || phase.batch_size == 0 {
                return Err(Error::Config(format!("{name}: lr, clip and batch_size must be positive")));
            }
        }
        if self.experiment.chosen_rank == 0 || self.experiment.chosen_rank > self.world.vocab_size
        {
            return Err(Error::Config("chosen_rank out of range".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn phase_plan(&self) -> PhasePlan {
        PhasePlan {
            lm: self.train_lm.clone(),
            disc: self.train_disc.clone(),
            finetune: self.finetune.clone(),
            ce_arm_epochs: self.finetune_ce.epochs,
        }
    }
}

fn merge_toml(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(base_table), toml::Value::Table(overlay_table)) => {
            for (key, value) in overlay_table {
                match base_table.get_mut(&key) {
                    Some(slot) => merge_toml(slot, value),
                    None => {
                        base_table.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

/// Written into the output directory before any computation starts. A
/// manifest plus the input files reproduces the run; the timestamp is the
/// only field two identical runs differ in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Config,
    pub inputs: Vec<String>,
    pub out_dir: String,
    pub threads: usize,
    pub created_unix_ms: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: &Config, inputs: &[&Path], out_dir: &Path, threads: usize) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            out_dir: out_dir.display().to_string(),
            threads,
            created_unix_ms: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }
}
