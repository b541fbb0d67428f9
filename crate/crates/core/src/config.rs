//! Run configuration: defaults, `key = value` files and single-key overrides.

use std::path::PathBuf;
use std::time::Duration;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionStrategy, ThresholdPolicy};
use crate::reward::AttentionMode;
use crate::subgraph::PageRankConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    /// Neighbors kept per subgraph (`K`).
    pub subgraph_k: usize,
    /// Chunks kept after reranking (`k`).
    pub k: usize,
    /// Chunks retrieved for the base query and for each expansion item.
    pub per_item_k: usize,
    pub heads: usize,
    pub dim: usize,
    pub damping: f64,
    pub pagerank_max_iters: usize,
    pub pagerank_tolerance: f64,
    /// Generation temperature.
    pub temperature: f64,
    /// InfoNCE temperature `m`.
    pub infonce_m: f64,
    pub strategy: FusionStrategy,
    /// Fixed fusion threshold; `None` derives it from the best subgraph.
    pub tau: Option<f64>,
    pub fallback_tau: f64,
    /// A query entity maps to the KG only when its best cosine exceeds this.
    pub min_mapping_score: f64,
    pub attention_mode: AttentionMode,
    pub seed: u64,
    pub rm_epochs: usize,
    pub rm_lr: f64,
    pub service_url: Option<String>,
    pub stub: bool,
    pub stub_tables: Option<PathBuf>,
    pub timeout_secs: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            subgraph_k: 10,
            k: 10,
            per_item_k: 5,
            heads: 32,
            dim: 128,
            damping: 0.85,
            pagerank_max_iters: 100,
            pagerank_tolerance: 1e-8,
            temperature: 0.0,
            infonce_m: 0.05,
            strategy: FusionStrategy::RmFusion,
            tau: None,
            fallback_tau: 0.5,
            min_mapping_score: 0.0,
            attention_mode: AttentionMode::SinglePosition,
            seed: 0,
            rm_epochs: 100,
            rm_lr: 0.1,
            service_url: None,
            stub: false,
            stub_tables: None,
            timeout_secs: 60,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

impl PipelineConfig {
    /// Defaults overridden by `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key. `K` (subgraph size) and `k` (rerank cutoff) differ by case.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim_matches('"');
        match key {
            "K" => self.subgraph_k = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "per_item_k" => self.per_item_k = num(key, value)?,
            "h" | "heads" => self.heads = num(key, value)?,
            "d" | "dim" => self.dim = num(key, value)?,
            "damping" => self.damping = num(key, value)?,
            "pagerank_max_iters" => self.pagerank_max_iters = num(key, value)?,
            "pagerank_tolerance" => self.pagerank_tolerance = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "m" => self.infonce_m = num(key, value)?,
            "strategy" => {
                self.strategy = value
                    .parse()
                    .map_err(|_| Error::Config(format!("unknown strategy '{value}'")))?
            }
            "tau" => {
                self.tau = match value {
                    "" | "derived" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "fallback_tau" => self.fallback_tau = num(key, value)?,
            "min_mapping_score" => self.min_mapping_score = num(key, value)?,
            "attention_mode" => {
                self.attention_mode = match value {
                    "single_position" | "single" => AttentionMode::SinglePosition,
                    "per_triple" => AttentionMode::PerTriple,
                    _ => return Err(Error::Config(format!("unknown attention mode '{value}'"))),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "rm_epochs" => self.rm_epochs = num(key, value)?,
            "rm_lr" => self.rm_lr = num(key, value)?,
            "service_url" => self.service_url = (!value.is_empty()).then(|| value.to_string()),
            "stub" => self.stub = flag(key, value)?,
            "stub_tables" => self.stub_tables = (!value.is_empty()).then(|| PathBuf::from(value)),
            "timeout_secs" => self.timeout_secs = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.subgraph_k == 0 || self.k == 0 || self.per_item_k == 0 {
            return bad("K, k and per_item_k must be at least 1".into());
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return bad(format!("damping {} outside (0, 1)", self.damping));
        }
        if self.pagerank_max_iters == 0 || !(self.pagerank_tolerance > 0.0) {
            return bad("pagerank iterations and tolerance must be positive".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be non-negative", self.temperature));
        }
        if !(self.infonce_m > 0.0 && self.infonce_m.is_finite()) {
            return bad(format!("m {} must be positive", self.infonce_m));
        }
        for (name, t) in [("tau", self.tau), ("fallback_tau", Some(self.fallback_tau))] {
            if let Some(t) = t {
                if !(-1.0..=1.0).contains(&t) {
                    return bad(format!("{name} {t} outside [-1, 1]"));
                }
            }
        }
        if !(self.rm_lr > 0.0 && self.rm_lr.is_finite()) {
            return bad("rm_lr must be positive".into());
        }
        if self.stub && self.service_url.is_some() {
            return bad("stub mode takes no service_url".into());
        }
        Ok(())
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            threshold_policy: self.tau.map_or(ThresholdPolicy::DerivedFromMax, ThresholdPolicy::Fixed),
            strategy: self.strategy,
            fallback_tau: self.fallback_tau,
        }
    }

    pub fn pagerank(&self) -> PageRankConfig<f64> {
        PageRankConfig {
            damping: self.damping,
            max_iters: self.pagerank_max_iters,
            tolerance: self.pagerank_tolerance,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
