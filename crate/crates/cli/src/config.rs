use std::path::{Path, PathBuf};

use goweb::dataio::SynthConfig;
use goweb::experiment::ProtocolConfig;
use goweb::goal_embed::ReconTrainConfig;
use goweb::page_encoder::EstimatorConfig;
use goweb::session_model::{ModelMode, SessionModelConfig};
use goweb::tasks::TaskTrainConfig;
use goweb::taxonomy::{load_taxonomy, GoalTaxonomy};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Every knob of a run. Sub-config seeds are overwritten by the top-level
/// `seed` when the config is resolved.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Taxonomy document; the bundled example taxonomy when absent.
    pub taxonomy: Option<PathBuf>,
    pub goals: ReconTrainConfig,
    pub estimator: EstimatorConfig,
    pub session: SessionModelConfig,
    pub train: TaskTrainConfig,
    pub protocol: ProtocolConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|_| CliError::Missing(format!("config not found: {}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies command-line overrides, propagates the seed and validates.
    pub fn resolve(mut self, seed: Option<u64>, mode: Option<ModelMode>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(m) = mode {
            self.session.mode = m;
        }
        self.goals.seed = self.seed;
        self.estimator.seed = self.seed;
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.goals.validate()?;
        self.estimator.validate()?;
        self.session.validate(self.goals.dim)?;
        self.train.validate()?;
        self.protocol.validate()?;
        Ok(())
    }

    pub fn taxonomy(&self) -> Result<GoalTaxonomy, CliError> {
        match &self.taxonomy {
            None => Ok(GoalTaxonomy::example()),
            Some(p) if !p.exists() => Err(CliError::Missing(format!("taxonomy not found: {}", p.display()))),
            Some(p) => Ok(load_taxonomy(p)?),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
