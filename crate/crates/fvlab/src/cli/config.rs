use crate::cltrain::{PretrainConfig, TrainingConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fv::FvConfig;
use crate::model::ModelConfig;
use crate::tasks::SuiteConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "FVLAB_OUT";

fn default_out() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

/// Every knob of an experiment. A run is reproducible from this plus `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub suite: SuiteConfig,
    pub pretrain: PretrainConfig,
    pub training: TrainingConfig,
    pub fv: FvConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            out_dir: default_out(),
            model: ModelConfig::default(),
            suite: SuiteConfig::default(),
            pretrain: PretrainConfig::default(),
            training: TrainingConfig::default(),
            fv: FvConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    /// Applies `section.key=value` overrides; values are parsed as TOML, falling back to strings.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self)?;
        for s in sets {
            let (key, raw) = s.split_once('=').ok_or_else(|| Error::Config(format!("override {s} lacks '='")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, p) in parts.iter().enumerate() {
                let table =
                    node.as_table_mut().ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
                if i + 1 == parts.len() {
                    table.insert(p.to_string(), value.clone());
                    break;
                }
                node = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            }
        }
        let c: ExperimentConfig = root.try_into()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.training.validate(&self.model)?;
        self.suite.sequence.validate()?;
        if self.model.vocab < self.suite.vocab.size {
            return Err(Error::Config("model vocabulary smaller than the task vocabulary".into()));
        }
        Ok(())
    }

    /// Defaults with a three-task sequence, a gentler learning rate and an
    /// intervention sweep over every layer; sized for a single CPU core.
    pub fn short_sequence() -> Self {
        let mut c = ExperimentConfig::default();
        c.suite.sequence.train.truncate(3);
        c.training.lr = 2e-4;
        c.eval.layer_sweep = (0..c.model.n_layers).collect();
        c
    }

    /// The model config with the experiment seed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { seed: self.seed, ..self.model.clone() }
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.out_dir.join("m0.fvl")
    }

    pub fn head_set_path(&self) -> PathBuf {
        self.out_dir.join("heads.json")
    }

    pub fn ce_grid_path(&self) -> PathBuf {
        self.out_dir.join("ce_grid.csv")
    }
}
