//! Run configuration file (TOML) and named presets.

use crate::baselines::FormationConfig;
use crate::crowdworld::WorldConfig;
use crate::env::EnvConfig;
use crate::marl::TrainConfig;
use crate::neural::{Architecture, ModelConfig};
use crate::perception::PerceptionConfig;
use crate::safety::{NoiseConfig, SafetyConfig, SmoothConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("unknown preset {0:?} (expected desk or paper)")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub perception: PerceptionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub safety: SafetyConfig,
    pub smooth: SmoothConfig,
    pub noise: NoiseConfig,
    /// Vertex layout of the scripted formation tracker.
    pub formation: FormationConfig,
}

impl RunConfig {
    /// Laptop-sized run: 4 environments, 2 cameras, 20 iterations.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.world.num_cameras = 2;
        c.train.num_envs = 4;
        c.train.train_batch = 100;
        c.train.minibatch = 50;
        c.train.total_steps = 2_000;
        c.train.lr_schedule = TrainConfig::scaled_schedule(c.train.total_steps);
        c.train.checkpoint_every = 5;
        c
    }

    /// Reference scale: 28 rollouts, 700-step batches, 700k steps.
    pub fn paper() -> Self {
        Self::default()
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is serialisable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            world: self.world.clone(),
            perception: self.perception.clone(),
            safety: self.safety.clone(),
            smooth: self.smooth.clone(),
            noise: self.noise.clone(),
            reward_mode: self.train.reward_mode,
            always_ctcr: false,
            freeze_cameras: false,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            model: self.model.clone(),
            obs_dim: self.perception.layout().len(),
            action_factors: self.env_config().action_factors(),
            max_cameras: self.perception.max_cameras,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let p = RunConfig::preset("paper").unwrap();
        assert_eq!((p.train.train_batch, p.train.minibatch, p.train.sgd_iters), (700, 350, 16));
        assert_eq!(p.train.num_envs, 28);
        let d = RunConfig::preset("desk").unwrap();
        assert_eq!(d.train.iterations(), 20);
        assert_eq!(d.train.num_envs, 4);
        d.validate().unwrap();
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let d = RunConfig::desk();
        let text = d.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), d);
    }

    #[test]
    fn partial_file_and_errors() {
        let c = RunConfig::from_toml_str("[world]\nnum_cameras = 4\n[train]\nsgd_iters = 2\n").unwrap();
        assert_eq!(c.world.num_cameras, 4);
        assert_eq!(c.train.sgd_iters, 2);
        assert_eq!(c.train.minibatch, 350);
        let err = RunConfig::from_toml_str("[world]\nnum_cams = 4\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(m) if m.contains("line 2")));
        assert!(matches!(
            RunConfig::from_toml_str("[train]\nminibatch = 333\n"),
            Err(ConfigError::Invalid(_))
        ));
    }
}
