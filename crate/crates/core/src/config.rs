//! One TOML document for a whole run. Every section and every key is
//! optional; omitted keys take the library defaults. Two keys accept a `0`
//! sentinel meaning "derive from the scenario": `channel.c0_bits` (payload
//! scale from grid size) and `coalition.neighbor_radius` (twice the sensing
//! radius).

use crate::channel::{ChannelConfig, ChannelConfigError};
use crate::coalition::{CoalitionConfig, CoalitionConfigError};
use crate::metrics::MetricsConfig;
use crate::perception::CurveConfig;
use crate::scheduling::SchedulerConfig;
use crate::world::{ScenarioConfig, ScenarioError};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub scenario: ScenarioConfig,
    pub curve: CurveConfig,
    pub channel: ChannelConfig,
    pub coalition: CoalitionConfig,
    pub scheduler: SchedulerConfig,
    pub metrics: MetricsConfig,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("channel: {0}")]
    Channel(#[from] ChannelConfigError),
    #[error("coalition: {0}")]
    Coalition(#[from] CoalitionConfigError),
    #[error("curve: {0}")]
    Curve(String),
    #[error("scheduler: {0}")]
    Scheduler(String),
    #[error("metrics: {0}")]
    Metrics(String),
}

impl SimConfig {
    /// Parse, resolve sentinels, validate.
    pub fn from_toml(text: &str) -> Result<SimConfig, ConfigError> {
        let mut cfg: SimConfig = toml::from_str(text)?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<SimConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        SimConfig::from_toml(&text)
    }

    /// Replace `0` sentinels with scenario-derived values.
    pub fn resolve(&mut self) {
        if self.channel.c0_bits == 0.0 {
            self.channel.c0_bits = ChannelConfig::default_c0(self.scenario.grid_size);
        }
        if self.coalition.neighbor_radius == 0.0 {
            self.coalition.neighbor_radius = 2.0 * self.scenario.r_sens;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario.validate()?;
        self.curve.validate().map_err(ConfigError::Curve)?;
        self.channel.validate()?;
        self.coalition.validate()?;
        self.scheduler.validate().map_err(ConfigError::Scheduler)?;
        self.metrics.validate().map_err(ConfigError::Metrics)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
