//! Engine-wide configuration. Every default can be overridden from one TOML
//! or JSON file, chosen explicitly or through `STOCK_ENGINE_CONFIG`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::action::BinningConfig;
use crate::backtest::BacktestConfig;
use crate::decoder::GeneratorConfig;
use crate::error::{Error, Result};
use crate::reward::RewardWeights;
use crate::rl::{UncertaintyParams, DEFAULT_EPS};

pub const CONFIG_ENV_VAR: &str = "STOCK_ENGINE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub reward: RewardWeights,
    pub binning: BinningConfig,
    pub uncertainty: UncertaintyParams,
    /// Raw summed variance that maps to `U_q = 1`.
    pub uncertainty_raw_cap: f64,
    /// Groups whose reward std falls below this get zero advantages.
    pub advantage_eps: f64,
    pub generator: GeneratorConfig,
    pub backtest: BacktestConfig,
    /// Group size assumed when a grouped request does not declare one.
    pub default_group_size: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            reward: RewardWeights::default(),
            binning: BinningConfig::default(),
            uncertainty: UncertaintyParams::default(),
            uncertainty_raw_cap: 1.0,
            advantage_eps: DEFAULT_EPS,
            generator: GeneratorConfig::default(),
            backtest: BacktestConfig::default(),
            default_group_size: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigFormat {
    Toml,
    Json,
}

impl ConfigFormat {
    /// `.json` means JSON; anything else is read as TOML.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => ConfigFormat::Json,
            _ => ConfigFormat::Toml,
        }
    }
}

impl EngineConfig {
    pub fn parse(text: &str, format: ConfigFormat) -> Result<Self> {
        let cfg: EngineConfig = match format {
            ConfigFormat::Json => serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
            ConfigFormat::Toml => toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, ConfigFormat::from_path(path))
    }

    /// An explicit path wins over the environment variable; with neither,
    /// the defaults apply.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        let from_env = std::env::var_os(CONFIG_ENV_VAR)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from);
        match explicit.map(Path::to_path_buf).or(from_env) {
            Some(path) => Self::load(&path),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        self.binning.validate()?;
        self.uncertainty.validate()?;
        self.backtest.validate()?;
        if !(self.uncertainty_raw_cap.is_finite() && self.uncertainty_raw_cap > 0.0) {
            return Err(Error::Config("uncertainty_raw_cap must be positive".into()));
        }
        if !(self.advantage_eps >= 0.0) {
            return Err(Error::Config("advantage_eps must be non-negative".into()));
        }
        if self.default_group_size == 0 {
            return Err(Error::Config("default_group_size must be at least 1".into()));
        }
        if self.generator.candidates == 0 {
            return Err(Error::Config("generator.candidates must be at least 1".into()));
        }
        if self.generator.level_sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("generator.level_sigma must be non-negative".into()));
        }
        Ok(())
    }
}
