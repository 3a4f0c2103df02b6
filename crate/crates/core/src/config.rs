//! Declarative run configuration (TOML): one file describes the dataset,
//! the federation, local training, the attack, probes, the monitor, and
//! defense probes. `run.seed` is the single source of randomness; it is
//! propagated into the dataset and federation sections when the experiment
//! loads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::DatasetSpec;
use crate::defense::StripConfig;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::federation::{FederationConfig, MonitorConfig, TriggerKind};
use crate::injector::InjectorConfig;
use crate::models::EncoderConfig;
use crate::ssl::SslConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    pub name: String,
    pub seed: u64,
    /// Base directory experiment artifacts land under.
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

fn default_out_dir() -> String {
    "runs".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_trigger")]
    pub trigger: TriggerKind,
    #[serde(flatten)]
    pub params: AttackConfig,
}

fn default_trigger() -> TriggerKind {
    TriggerKind::Injector
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            enabled: false,
            trigger: default_trigger(),
            params: AttackConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseSection {
    #[serde(default)]
    pub strip: StripConfig,
    /// Test samples scored by STRIP / clustered by activation clustering.
    #[serde(default = "default_defense_samples")]
    pub samples: usize,
}

fn default_defense_samples() -> usize {
    100
}

impl Default for DefenseSection {
    fn default() -> Self {
        DefenseSection {
            strip: StripConfig::default(),
            samples: default_defense_samples(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ExportSection {
    /// Clean/poisoned/residual PNG triplets written during evaluation.
    #[serde(default)]
    pub triplets: usize,
}

/// The full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run: RunSection,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub ssl: SslConfig,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub injector: InjectorConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default)]
    pub defense: DefenseSection,
    #[serde(default)]
    pub export: ExportSection,
}

impl ExperimentConfig {
    /// Parse, propagate the run seed, and validate every section.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.dataset.seed = cfg.run.seed;
        cfg.federation.seed = cfg.run.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.name.is_empty() {
            return Err(Error::Config("run.name must be nonempty".to_string()));
        }
        self.dataset.validate()?;
        self.federation.validate()?;
        self.ssl.validate()?;
        if self.attack.enabled {
            self.attack.params.validate()?;
            self.injector.validate()?;
            if self.federation.n_malicious == 0 {
                return Err(Error::Config(
                    "attack.enabled requires federation.n_malicious >= 1".to_string(),
                ));
            }
        }
        self.defense.strip.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
