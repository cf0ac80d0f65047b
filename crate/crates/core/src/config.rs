//! Run configuration, loaded from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::forest::ForestParams;
use crate::grouper::GrouperParams;
use crate::qoe::{CalibrationTable, ObjectiveThresholds};
use crate::tracker::TrackerConfig;

/// Environment variable naming a config file when `--config` is absent.
pub const CONFIG_ENV: &str = "CG_LENS_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TitleConfig {
    /// Below this vote share the title is reported as Unknown.
    pub unknown_threshold: f64,
}

impl Default for TitleConfig {
    fn default() -> Self {
        TitleConfig { unknown_threshold: 0.40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct QoeConfig {
    pub objective: ObjectiveThresholds,
    /// Calibration table file; the shipped table when absent.
    pub calibration: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub title: ForestParams,
    pub stage: ForestParams,
    pub pattern: ForestParams,
    pub test_fraction: f64,
    /// Cap on stage-model training rows (uniform subsample above it).
    pub max_stage_rows: usize,
    /// Cap on pattern-model training rows.
    pub max_pattern_rows: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            title: ForestParams::new(100, 20, 11),
            stage: ForestParams::new(40, 14, 12),
            pattern: ForestParams::new(60, 24, 13),
            test_fraction: 0.2,
            max_stage_rows: 20_000,
            max_pattern_rows: 100_000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub detector: DetectorConfig,
    pub grouper: GrouperParams,
    pub tracker: TrackerConfig,
    pub title: TitleConfig,
    pub qoe: QoeConfig,
    pub training: TrainingConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    /// `explicit`, else the file named by `CG_LENS_CONFIG`, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        if let Some(p) = explicit {
            return Config::load(p);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Config::load(Path::new(&p)),
            _ => Ok(Config::default()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.grouper.validate()?;
        self.tracker.validate()?;
        if (self.grouper.window_s - self.tracker.launch_window_s).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "grouper window ({} s) and tracker launch window ({} s) must match",
                self.grouper.window_s, self.tracker.launch_window_s
            )));
        }
        if !(0.0..=1.0).contains(&self.title.unknown_threshold) {
            return Err(Error::Config("title.unknown_threshold must lie in [0, 1]".into()));
        }
        let t = &self.training;
        if !(t.test_fraction > 0.0 && t.test_fraction < 1.0) {
            return Err(Error::Config("training.test_fraction must lie in (0, 1)".into()));
        }
        for p in [t.title, t.stage, t.pattern] {
            if p.n_trees == 0 || p.max_depth == 0 {
                return Err(Error::Config("forest n_trees and max_depth must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn calibration(&self) -> Result<CalibrationTable> {
        match &self.qoe.calibration {
            Some(p) => CalibrationTable::load(p),
            None => Ok(CalibrationTable::shipped()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_partial_files() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(Config::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
        let c = Config::parse("[grouper]\nvariation = 0.2\n").unwrap();
        assert_eq!(c.grouper.variation, 0.2);
        assert_eq!(c.tracker, TrackerConfig::default());
    }

    #[test]
    fn mismatched_windows_rejected() {
        assert!(Config::parse("[grouper]\nwindow_s = 4.0\n").is_err());
        assert!(Config::parse("[title]\nunknown_threshold = 2.0\n").is_err());
        assert!(Config::parse("not toml = = 1").is_err());
    }
}
