//! Run configuration.
//!
//! Values resolve as defaults, then an optional TOML file, then the
//! `CICD_TRIAGE_LLM_*` environment variables, then command-line flags. The resolved [`RunConfig`] is written into every output.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drain::{DrainConfig, DEFAULT_RETENTION};
use crate::filter::FilterConfig;
use crate::llm::LlmConfig;
use crate::pruner::PrunerConfig;
use crate::rca::{Ablation, PromptConfig};
use crate::solution::RouteKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    /// Number of most recent successful runs kept per task.
    pub retention: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            retention: DEFAULT_RETENTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub routes: Vec<RouteKind>,
    pub per_route_cap: usize,
    pub fused_cap: usize,
    pub rrf_k: f64,
    pub query_token_limit: usize,
    pub overlap_threshold: f64,
    pub rerank_timeout_secs: u64,
    pub rerank_retries: usize,
    /// Token budget for knowledge packed into the solution prompt.
    pub context_token_limit: usize,
    pub chunk_tokens: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            routes: RouteKind::DEFAULT.to_vec(),
            per_route_cap: 60,
            fused_cap: 100,
            rrf_k: 60.0,
            query_token_limit: 3000,
            overlap_threshold: 0.8,
            rerank_timeout_secs: 10,
            rerank_retries: 2,
            context_token_limit: 8000,
            chunk_tokens: 512,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.routes.is_empty() || self.routes.len() > 8 {
            return Err(format!("between 1 and 8 routes required, got {}", self.routes.len()));
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return Err(format!("overlap_threshold {} not in (0, 1]", self.overlap_threshold));
        }
        if self.rrf_k < 0.0 || self.query_token_limit == 0 || self.chunk_tokens == 0 {
            return Err("rrf_k, query_token_limit and chunk_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub drain: DrainConfig,
    pub store: StoreConfig,
    pub filter: FilterConfig,
    pub pruner: PrunerConfig,
    pub prompt: PromptConfig,
    pub llm: LlmConfig,
    pub retrieval: RetrievalConfig,
    pub ablation: Ablation,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.drain
            .validate()
            .map_err(|e| e.to_string())
            .and_then(|_| self.filter.validate())
            .and_then(|_| self.pruner.validate())
            .and_then(|_| self.llm.validate())
            .and_then(|_| self.retrieval.validate())
            .map_err(ConfigError::Invalid)?;
        if self.store.retention == 0 {
            return Err(ConfigError::Invalid("store.retention must be at least 1".into()));
        }
        Ok(())
    }
}

/// Pretty JSON with object keys sorted, newline-terminated.
pub fn to_canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = serde_json::to_string_pretty(&v)?;
    out.push('\n');
    Ok(out)
}
