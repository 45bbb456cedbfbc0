//! Runtime configuration.
//!
//! Configuration files are flat `key = value` text. Blank lines and lines
//! starting with `#` are ignored. Unknown keys are rejected so that typos
//! surface at startup.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `alpha` | 1.0 | exploration weight of the credibility bandit |
//! | `eta` | 0.1 | step size of the scalar credibility score |
//! | `lambda_decay` | 0.8 | short-term memory decay factor per engine step |
//! | `tau` | 0.2 | short-term memory eviction threshold |
//! | `a0` | 1.0 | activation of a freshly added or recalled entry |
//! | `stm_capacity` | 32 | maximum number of short-term entries |
//! | `char_budget` | 4000 | character budget of the short-term snapshot |
//! | `d_embed` | 64 | embedding dimension |
//! | `max_depth` | 5 | recursion depth cap |
//! | `step_budget` | 64 | maximum executed commands per query |
//! | `fanout_cap` | 8 | maximum commands accepted from one expansion |
//! | `min_score` | 0.1 | credibility floor for retrieval |
//! | `top_k` | 5 | retrieval depth |
//! | `doc_budget` | 8000 | document length above which the browser summarizes |
//! | `summary_chunk` | 1000 | target length of one chunk summary |
//! | `route.<role>` | | backend name serving a role |
//! | `route.default` | | backend name for every unrouted role |
//! | `backend.<name>.<field>` | | backend settings, see [`BackendSpec`] |
//! | `search.base_url` | | external search endpoint |
//! | `auth_token` | | shared token required by the service |

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub alpha: f64,
    pub eta: f64,
    pub lambda_decay: f64,
    pub tau: f64,
    pub a0: f64,
    pub stm_capacity: usize,
    pub char_budget: usize,
    pub d_embed: usize,
    pub max_depth: usize,
    pub step_budget: usize,
    pub fanout_cap: usize,
    pub min_score: f64,
    pub top_k: usize,
    pub doc_budget: usize,
    pub summary_chunk: usize,
    pub routes: BTreeMap<String, String>,
    pub backends: BTreeMap<String, BackendSpec>,
    pub search_base_url: Option<String>,
    pub auth_token: Option<String>,
}

/// Settings for one named backend.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendSpec {
    /// `chat`, `embeddings`, `scripted` or `hash`.
    pub kind: String,
    pub base_url: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
    pub max_in_flight: usize,
    /// Fixture file for `scripted` backends.
    pub fixture: Option<String>,
}

impl Default for BackendSpec {
    fn default() -> Self {
        Self {
            kind: "chat".into(),
            base_url: None,
            model: None,
            api_key_env: None,
            timeout_ms: 30_000,
            retries: 2,
            max_in_flight: 4,
            fixture: None,
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            eta: 0.1,
            lambda_decay: 0.8,
            tau: 0.2,
            a0: 1.0,
            stm_capacity: 32,
            char_budget: 4000,
            d_embed: 64,
            max_depth: 5,
            step_budget: 64,
            fanout_cap: 8,
            min_score: 0.1,
            top_k: 5,
            doc_budget: 8000,
            summary_chunk: 1000,
            routes: BTreeMap::new(),
            backends: BTreeMap::new(),
            search_base_url: None,
            auth_token: None,
        }
    }
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", n + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
        }
        match key {
            "alpha" => self.alpha = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "lambda_decay" => self.lambda_decay = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "a0" => self.a0 = num(key, value)?,
            "stm_capacity" => self.stm_capacity = num(key, value)?,
            "char_budget" => self.char_budget = num(key, value)?,
            "d_embed" => self.d_embed = num(key, value)?,
            "max_depth" => self.max_depth = num(key, value)?,
            "step_budget" => self.step_budget = num(key, value)?,
            "fanout_cap" => self.fanout_cap = num(key, value)?,
            "min_score" => self.min_score = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "doc_budget" => self.doc_budget = num(key, value)?,
            "summary_chunk" => self.summary_chunk = num(key, value)?,
            "search.base_url" => self.search_base_url = Some(value.to_string()),
            "auth_token" => self.auth_token = Some(value.to_string()),
            _ => {
                if let Some(role) = key.strip_prefix("route.") {
                    self.routes.insert(role.to_string(), value.to_string());
                } else if let Some(rest) = key.strip_prefix("backend.") {
                    let (name, field) = rest
                        .split_once('.')
                        .ok_or_else(|| format!("malformed backend key `{key}`"))?;
                    let spec = self.backends.entry(name.to_string()).or_default();
                    match field {
                        "kind" => spec.kind = value.to_string(),
                        "base_url" => spec.base_url = Some(value.to_string()),
                        "model" => spec.model = Some(value.to_string()),
                        "api_key_env" => spec.api_key_env = Some(value.to_string()),
                        "timeout_ms" => spec.timeout_ms = num(key, value)?,
                        "retries" => spec.retries = num(key, value)?,
                        "max_in_flight" => spec.max_in_flight = num(key, value)?,
                        "fixture" => spec.fixture = Some(value.to_string()),
                        _ => return Err(format!("unknown backend field `{field}`")),
                    }
                } else {
                    return Err(format!("unknown key `{key}`"));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(self.eta >= 0.0) {
            return bad("eta must be nonnegative");
        }
        if !(self.lambda_decay > 0.0 && self.lambda_decay <= 1.0) {
            return bad("lambda_decay must lie in (0, 1]");
        }
        if !(self.a0 > 0.0) || !(self.tau > 0.0) || self.tau > self.a0 {
            return bad("require 0 < tau <= a0");
        }
        if self.d_embed < 2 {
            return bad("d_embed must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return bad("min_score must lie in [0, 1]");
        }
        if self.top_k == 0 {
            return bad("top_k must be positive");
        }
        if self.stm_capacity == 0 || self.fanout_cap == 0 || self.step_budget == 0 {
            return bad("stm_capacity, fanout_cap and step_budget must be positive");
        }
        if self.doc_budget == 0 || self.summary_chunk == 0 {
            return bad("doc_budget and summary_chunk must be positive");
        }
        Ok(())
    }

    /// Backend name serving `role`, falling back to `route.default`.
    pub fn route_for(&self, role: &str) -> Option<&str> {
        self.routes
            .get(role)
            .or_else(|| self.routes.get("default"))
            .map(String::as_str)
    }
}
