//! The run configuration file: one JSON document drives every subcommand.
//! Each command validates the sections it needs; unknown fields anywhere in
//! the document are rejected up front.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use gpc_core::network::ModelConfig;
use gpc_core::signal::SequenceConfig;
use gpc_core::{GpcError, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Observation source: a synthetic generator or a CSV pointer.
    #[serde(default)]
    pub sequence: Option<SequenceConfig>,
    /// Model architecture and training rates.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Trained checkpoint consumed by eval and plan.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Rollout length for eval.
    #[serde(default)]
    pub horizon: Option<usize>,
    /// Strides visited by stride-sweep.
    #[serde(default)]
    pub strides: Option<Vec<usize>>,
    /// Action set for plan: one top-level delta vector per action.
    #[serde(default)]
    pub actions: Option<Vec<Vec<f64>>>,
    /// Policy lengths for plan; defaults to [1].
    #[serde(default)]
    pub lengths: Option<Vec<usize>>,
    /// Candidate rollout horizons for plan; defaults to the longest length.
    #[serde(default)]
    pub horizons: Option<Vec<usize>>,
    /// Goal trajectory for plan, one vector per step; a single entry is held
    /// for the whole rollout.
    #[serde(default)]
    pub goal: Option<Vec<Vec<f64>>>,
    /// Isotropic variance of the goal precision; defaults to 1.
    #[serde(default)]
    pub goal_variance: Option<f64>,
    /// Seed for gradcheck; defaults to 0.
    #[serde(default)]
    pub seed: Option<u64>,
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| GpcError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Pull a required section out of the config, naming the missing field.
pub fn require<T>(field: Option<T>, name: &str, command: &str) -> Result<T> {
    field.ok_or_else(|| GpcError::InvalidConfig {
        field: name.into(),
        reason: format!("required by {command}"),
    })
}
