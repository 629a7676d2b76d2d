//! Experiment configuration files.
//!
//! ```toml
//! [federation]
//! seed = 7
//! method = "fed-sb"
//! rank = 2
//! clients = 5
//! rounds = 50
//! lr = 0.1
//!
//! [federation.task]
//! model = "linear"
//! input_dim = 16
//! output_dim = 8
//!
//! [federation.task.teacher]
//! samples = 500
//! delta_rank = 2
//!
//! [output]
//! dir = "results/fedsb"
//!
//! [sweep]
//! methods = ["fedit", "fedex-lora", "fed-sb"]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::Method;
use crate::fedsim::{FedError, FederationConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error(transparent)]
    Invalid(#[from] FedError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

/// Grid of runs derived from the base federation config. Empty lists keep
/// the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub federation: FederationConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for cfg in self.sweep_configs() {
            cfg.validate()?;
        }
        Ok(())
    }

    /// The base config expanded over the sweep grid (just the base without one).
    pub fn sweep_configs(&self) -> Vec<FederationConfig> {
        let base = &self.federation;
        let Some(sweep) = &self.sweep else {
            return vec![base.clone()];
        };
        let methods = or_base(&sweep.methods, base.method);
        let ranks = or_base(&sweep.ranks, base.rank);
        let seeds = or_base(&sweep.seeds, base.seed);
        let mut out = Vec::new();
        for &method in &methods {
            for &rank in &ranks {
                for &seed in &seeds {
                    let mut cfg = base.clone();
                    cfg.method = method;
                    cfg.rank = rank;
                    cfg.seed = seed;
                    if method != Method::FedSb {
                        cfg.client_ranks = None;
                    }
                    out.push(cfg);
                }
            }
        }
        out
    }
}

fn or_base<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}
