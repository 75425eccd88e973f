//! Run configuration: one JSON document covering model geometry, the
//! experiment grid, thresholds, cost constants and file locations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{ModelShape, DEFAULT_RECENT_TOKENS, DEFAULT_SINK_TOKENS};
use crate::baseline_caches::DEFAULT_BLOCK_SIZE;
use crate::error::{Error, Result};
use crate::head_profile::{ThresholdParams, DEFAULT_EPSILON, DEFAULT_ETA, DEFAULT_POWER};
use crate::pipeline::CostModel;
use crate::policy::PolicyRegistry;
use crate::retrieval::{RetrieverVariant, DEFAULT_HASH_BITS};
use crate::similarity_cache::ForceMode;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "KVLAB_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "kvlab-out";

fn default_shape() -> ModelShape {
    ModelShape {
        num_layers: 8,
        num_q_heads: 8,
        num_kv_heads: 2,
        head_dim: 64,
        bytes_per_element: 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub shape: ModelShape,
    pub policies: Vec<String>,
    pub topk_ratios: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub n_prompt: usize,
    pub steps: usize,
    pub d_model: usize,
    pub layer_drift: f64,
    pub high_importance_fraction: f64,
    pub eta: f64,
    pub power: f64,
    pub epsilon: f64,
    pub sink_tokens: usize,
    pub recent_tokens: usize,
    pub retriever: RetrieverVariant,
    pub hash_bits: usize,
    pub block_size: usize,
    pub block_capacity_factor: usize,
    pub profile_sequences: usize,
    pub profile_steps: usize,
    pub importance_samples: usize,
    pub cost: CostModel,
    /// Device bytes available for persistent heads; unlimited when absent.
    pub hbm_budget: Option<u64>,
    pub force: ForceMode,
    pub measure_error: bool,
    /// Parallel grid workers; all available cores when absent.
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
    /// Recorded trace replacing the synthetic model.
    pub trace: Option<PathBuf>,
    /// Per-query-head importance, `[layer][q_head]` JSON.
    pub importance: Option<PathBuf>,
    /// Precomputed head profile and partition plan.
    pub profile: Option<PathBuf>,
    pub plan: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            shape: default_shape(),
            policies: vec!["similarity".into()],
            topk_ratios: vec![0.10],
            sigmas: vec![0.05],
            seeds: vec![0],
            n_prompt: 1024,
            steps: 128,
            d_model: 256,
            layer_drift: 0.1,
            high_importance_fraction: 0.2,
            eta: DEFAULT_ETA,
            power: DEFAULT_POWER,
            epsilon: DEFAULT_EPSILON,
            sink_tokens: DEFAULT_SINK_TOKENS,
            recent_tokens: DEFAULT_RECENT_TOKENS,
            retriever: RetrieverVariant::SignHash,
            hash_bits: DEFAULT_HASH_BITS,
            block_size: DEFAULT_BLOCK_SIZE,
            block_capacity_factor: 3,
            profile_sequences: 30,
            profile_steps: 16,
            importance_samples: 4,
            cost: CostModel::default(),
            hbm_budget: None,
            force: ForceMode::None,
            measure_error: true,
            workers: None,
            out_dir: None,
            trace: None,
            importance: None,
            profile: None,
            plan: None,
        }
    }
}

fn nonempty<T>(name: &str, v: &[T]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::config(format!("{name} must list at least one value")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn thresholds(&self) -> ThresholdParams {
        ThresholdParams {
            eta: self.eta,
            power: self.power,
            epsilon: self.epsilon,
        }
    }

    /// Output directory: the config value, else the environment, else a fixed default.
    pub fn resolved_out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate().map_err(|e| Error::config(e.to_string()))?;
        nonempty("policies", &self.policies)?;
        nonempty("topk_ratios", &self.topk_ratios)?;
        nonempty("sigmas", &self.sigmas)?;
        nonempty("seeds", &self.seeds)?;
        let registry = PolicyRegistry::default();
        for p in &self.policies {
            if !registry.contains(p) {
                return Err(Error::Unknown {
                    kind: "policy",
                    name: p.clone(),
                    known: registry.names().join(", "),
                });
            }
        }
        for r in &self.topk_ratios {
            if !(*r > 0.0 && *r <= 1.0) {
                return Err(Error::config(format!("topk ratio {r} outside (0, 1]")));
            }
        }
        for s in &self.sigmas {
            if !(s.is_finite() && *s >= 0.0) {
                return Err(Error::config(format!("sigma {s} must be finite and >= 0")));
            }
        }
        if self.n_prompt == 0 {
            return Err(Error::config("n_prompt must be >= 1"));
        }
        if self.d_model == 0 {
            return Err(Error::config("d_model must be >= 1"));
        }
        if !(self.layer_drift.is_finite() && self.layer_drift >= 0.0) {
            return Err(Error::config("layer_drift must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.high_importance_fraction) {
            return Err(Error::config("high_importance_fraction outside [0, 1]"));
        }
        if !(self.eta > -1.0 && self.eta <= 1.0) {
            return Err(Error::config(format!("eta {} outside (-1, 1]", self.eta)));
        }
        if !(self.power >= 1.0 && self.power.is_finite()) {
            return Err(Error::config(format!("power {} must be >= 1", self.power)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon {} must be > 0", self.epsilon)));
        }
        if self.sink_tokens + self.recent_tokens == 0 {
            return Err(Error::config("sink and recent windows cannot both be empty"));
        }
        if self.hash_bits == 0 {
            return Err(Error::config("hash_bits must be >= 1"));
        }
        if self.block_size == 0 || self.block_capacity_factor == 0 {
            return Err(Error::config("block_size and block_capacity_factor must be >= 1"));
        }
        if self.profile_sequences == 0 || self.profile_steps < 2 {
            return Err(Error::config("profiling needs >= 1 sequence of >= 2 steps"));
        }
        if self.importance_samples == 0 {
            return Err(Error::config("importance_samples must be >= 1"));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers must be >= 1"));
        }
        self.cost.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"stepz": 3}"#).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn partial_document_fills_defaults() {
        let c = RunConfig::from_json(r#"{"steps": 3, "policies": ["lru"]}"#).unwrap();
        assert_eq!(c.steps, 3);
        assert_eq!(c.n_prompt, RunConfig::default().n_prompt);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in [
            r#"{"topk_ratios": [0.0]}"#,
            r#"{"policies": ["fifo"]}"#,
            r#"{"eta": -1.0}"#,
            r#"{"sigmas": []}"#,
            r#"{"workers": 0}"#,
        ] {
            let c = RunConfig::from_json(bad).unwrap();
            assert!(c.validate().unwrap_err().is_config(), "{bad}");
        }
    }
}
