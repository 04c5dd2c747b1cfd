//! Engine configuration file (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::advantage::AdvantageConfig;
use crate::penalty::PenaltyConfig;
use crate::segmentation::{Segmenter, SegmenterConfig};
use crate::simulator::SimConfig;
use crate::ConfigError;

/// Settings for the HTTP reward service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Largest accepted request body; larger bodies are rejected with 413.
    pub max_request_bytes: usize,
    pub request_timeout_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".to_string(),
            max_request_bytes: 8 * 1024 * 1024,
            request_timeout_ms: 30_000,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.bind.parse::<std::net::SocketAddr>().is_err() {
            return Err(ConfigError::new("service.bind", format!("`{}` is not a socket address", self.bind)));
        }
        if self.max_request_bytes == 0 {
            return Err(ConfigError::new("service.max_request_bytes", "must be >= 1"));
        }
        if self.request_timeout_ms == 0 {
            return Err(ConfigError::new("service.request_timeout_ms", "must be >= 1"));
        }
        Ok(())
    }
}

/// Every tunable of the engine. All sections are optional in the file and
/// fall back to their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub segmenter: SegmenterConfig,
    pub penalty: PenaltyConfig,
    pub advantage: AdvantageConfig,
    pub service: ServiceConfig,
    pub simulation: SimConfig,
}

impl EngineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::new("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| ConfigError::new(e.field, format!("{}: {}", path.display(), e.message)))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("engine config is always representable in TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        Segmenter::from_config(&self.segmenter).map_err(|e| prefixed("segmenter", e))?;
        self.penalty.validate().map_err(|e| prefixed("penalty", e))?;
        self.advantage.validate().map_err(|e| prefixed("advantage", e))?;
        self.service.validate()?;
        self.simulation.validate().map_err(|e| prefixed("simulation", e))?;
        Ok(())
    }
}

fn prefixed(section: &str, e: ConfigError) -> ConfigError {
    ConfigError::new(format!("{section}.{}", e.field), e.message)
}
