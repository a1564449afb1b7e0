use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::EngineConfig;
use crate::indexer::IndexConfig;
use crate::llm::{BackendMode, HttpConfig};
use crate::localizer::LocalizerConfig;
use crate::validator::TestRunnerConfig;
use crate::vector::EmbedderConfig;

/// Every knob of a run. Loaded from TOML; any field may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub repo_root: Option<PathBuf>,
    pub index_dir: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub issue: Option<PathBuf>,
    pub backend: BackendMode,
    pub transcript: Option<PathBuf>,
    /// Leave candidate workspaces on disk after the run.
    pub keep_workspaces: bool,
    pub index: IndexConfig,
    pub embedder: EmbedderConfig,
    pub localizer: LocalizerConfig,
    pub engine: EngineConfig,
    pub runner: TestRunnerConfig,
    pub llm: HttpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            repo_root: None,
            index_dir: None,
            run_dir: None,
            issue: None,
            backend: BackendMode::Live,
            transcript: None,
            keep_workspaces: false,
            index: IndexConfig::default(),
            embedder: EmbedderConfig::default(),
            localizer: LocalizerConfig::default(),
            engine: EngineConfig::default(),
            runner: TestRunnerConfig::default(),
            llm: HttpConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(e.to_string()))
    }

    /// Relative paths in the file are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)
            .map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for slot in [
            &mut config.repo_root,
            &mut config.index_dir,
            &mut config.run_dir,
            &mut config.issue,
            &mut config.transcript,
        ] {
            if let Some(p) = slot.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `k` evenly spaced temperatures over the default range, unless the
    /// configured schedule already has `k` entries.
    pub fn set_candidate_count(&mut self, k: usize) -> Result<(), ConfigError> {
        if k == 0 {
            return Err(ConfigError("k must be at least 1".into()));
        }
        if self.engine.temperatures.len() != k {
            self.engine.temperatures = spread_temperatures(k);
        }
        Ok(())
    }
}

pub fn spread_temperatures(k: usize) -> Vec<f64> {
    const MAX: f64 = 0.8;
    if k == 1 {
        return vec![0.0];
    }
    (0..k)
        .map(|i| ((MAX * i as f64 / (k - 1) as f64) * 100.0).round() / 100.0)
        .collect()
}

pub fn parse_temperatures(text: &str) -> Result<Vec<f64>, ConfigError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| ConfigError(format!("temperature `{}`: {e}", t.trim())))
        })
        .collect()
}
