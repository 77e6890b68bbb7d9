//! Declarative run configuration (TOML).
//!
//! ```toml
//! seed = 1
//!
//! [network]
//! stage_channels = [16, 32, 64, 128]
//!
//! [optim]
//! total_epochs = 30
//!
//! [synth]
//! image_size = 64
//!
//! [paths]
//! dataset = "data"
//! checkpoint = "runs/best.ckpt"
//! log_dir = "runs"
//! ```
//!
//! Every key is optional; unknown keys are rejected. Relative paths are
//! resolved against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::synth::SynthConfig;
use crate::network::NetworkConfig;
use crate::training::OptimConfig;
use crate::{io_error, Error, Result};

pub const RESOLVED_NAME: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub log_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            checkpoint: "runs/best.ckpt".into(),
            log_dir: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Stop as soon as validation F1 reaches this value.
    pub target_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives network initialisation, data generation and shuffling.
    pub seed: u64,
    pub network: NetworkConfig,
    pub optim: OptimConfig,
    pub synth: SynthConfig,
    pub train: TrainSection,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            network: NetworkConfig::small(),
            optim: OptimConfig::default(),
            synth: SynthConfig::default(),
            train: TrainSection::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path` and anchors relative paths at its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.dataset, &mut cfg.paths.checkpoint, &mut cfg.paths.log_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.optim.validate()?;
        self.synth.validate()?;
        self.network.check_input(self.synth.image_size, self.synth.image_size)?;
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit a TOML integer (at most 2^63 - 1)".into()));
        }
        if let Some(t) = self.train.target_f1 {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config("target_f1 must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            seed: self.seed,
            ..self.optim.clone()
        }
    }

    /// Every field written out, defaults included.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
        let p = dir.join(RESOLVED_NAME);
        fs::write(&p, self.resolved()).map_err(io_error(&p))?;
        Ok(p)
    }

    pub fn digest(&self) -> [u8; 32] {
        network_digest(&self.network)
    }
}

/// SHA-256 of the resolved `[network]` section.
pub fn network_digest(network: &NetworkConfig) -> [u8; 32] {
    let text = toml::to_string(network).expect("network config serialises");
    Sha256::digest(text.as_bytes()).into()
}
