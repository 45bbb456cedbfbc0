//! Language-model access.
//!
//! Operators talk to a [`LanguageModel`] through a [`Router`] that maps each
//! [`Role`] to one backend, so a large model can plan while a small one
//! summarizes. Offline runs use [`ScriptedBackend`], whose replies are a pure
//! function of `(role, prompt, fixture)`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{BackendSpec, Config};
use crate::embedding::{Embedder, HashEmbedder, RemoteEmbedder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Coordinate,
    Respond,
    Discriminate,
    Summarize,
    Embed,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Coordinate,
        Role::Respond,
        Role::Discriminate,
        Role::Summarize,
        Role::Embed,
    ];

    /// Roles served by text completion.
    pub const COMPLETION: [Role; 4] = [
        Role::Coordinate,
        Role::Respond,
        Role::Discriminate,
        Role::Summarize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Coordinate => "coordinate",
            Role::Respond => "respond",
            Role::Discriminate => "discriminate",
            Role::Summarize => "summarize",
            Role::Embed => "embed",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown role `{s}`")))
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("no fixture rule matches role `{role}` for prompt starting {prefix:?}")]
    FixtureMiss { role: Role, prefix: String },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait LanguageModel: Send + Sync {
    fn complete(&self, role: Role, prompt: &str) -> Result<String, BackendError>;

    fn name(&self) -> &str {
        "backend"
    }
}

/// Hex SHA-256 of a prompt, used by exact-prompt fixture rules.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    pub reply: String,
}

impl ScriptRule {
    pub fn new(role: Role, contains: impl Into<String>, reply: impl Into<String>) -> Self {
        Self {
            role: Some(role),
            contains: Some(contains.into()),
            prompt_sha256: None,
            reply: reply.into(),
        }
    }

    /// Matches every prompt of `role`.
    pub fn any(role: Role, reply: impl Into<String>) -> Self {
        Self {
            role: Some(role),
            contains: None,
            prompt_sha256: None,
            reply: reply.into(),
        }
    }

    pub fn exact(role: Role, prompt: &str, reply: impl Into<String>) -> Self {
        Self {
            role: Some(role),
            contains: None,
            prompt_sha256: Some(prompt_hash(prompt)),
            reply: reply.into(),
        }
    }

    fn matches(&self, role: Role, prompt: &str, hash: &str) -> bool {
        self.role.map_or(true, |r| r == role)
            && self.contains.as_deref().map_or(true, |s| prompt.contains(s))
            && self.prompt_sha256.as_deref().map_or(true, |h| h == hash)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptFixture {
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub default: Option<String>,
    #[serde(default = "strict_default")]
    pub strict: bool,
}

fn strict_default() -> bool {
    true
}

impl ScriptFixture {
    pub fn strict(rules: Vec<ScriptRule>) -> Self {
        Self {
            rules,
            default: None,
            strict: true,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("fixture {}: {e}", path.as_ref().display())))
    }
}

/// Deterministic fixture-driven backend; first matching rule wins.
#[derive(Debug)]
pub struct ScriptedBackend {
    name: String,
    fixture: ScriptFixture,
    calls: Mutex<Vec<(Role, String)>>,
}

impl ScriptedBackend {
    pub fn new(fixture: ScriptFixture) -> Self {
        Self::named("scripted", fixture)
    }

    pub fn named(name: impl Into<String>, fixture: ScriptFixture) -> Self {
        Self {
            name: name.into(),
            fixture,
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Every `(role, prompt)` seen so far.
    pub fn calls(&self) -> Vec<(Role, String)> {
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn calls_for(&self, role: Role) -> usize {
        self.calls().iter().filter(|(r, _)| *r == role).count()
    }
}

impl LanguageModel for ScriptedBackend {
    fn complete(&self, role: Role, prompt: &str) -> Result<String, BackendError> {
        self.calls
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push((role, prompt.to_string()));
        let hash = prompt_hash(prompt);
        if let Some(rule) = self
            .fixture
            .rules
            .iter()
            .find(|r| r.matches(role, prompt, &hash))
        {
            return Ok(rule.reply.clone());
        }
        match (&self.fixture.default, self.fixture.strict) {
            (Some(d), false) => Ok(d.clone()),
            _ => Err(BackendError::FixtureMiss {
                role,
                prefix: prompt.chars().take(60).collect(),
            }),
        }
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Backend computing replies with a closure; used by oracle harnesses.
pub struct FnBackend<F> {
    name: String,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(Role, &str) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self {
            name: name.into(),
            f,
        }
    }
}

impl<F> LanguageModel for FnBackend<F>
where
    F: Fn(Role, &str) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, role: Role, prompt: &str) -> Result<String, BackendError> {
        (self.f)(role, prompt)
    }

    fn name(&self) -> &str {
        &self.name
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn enter(&self) -> GatePass<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        GatePass(self)
    }
}

struct GatePass<'a>(&'a Gate);

impl Drop for GatePass<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Chat-completion client: `{model, messages}` → `{choices:[{message:{content}}]}`.
pub struct HttpBackend {
    name: String,
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: Option<String>,
    retries: u32,
    backoff: Duration,
    gate: Gate,
}

impl HttpBackend {
    pub fn new(name: impl Into<String>, base_url: &str, model: impl Into<String>) -> Result<Self> {
        Self::from_spec(
            name,
            &BackendSpec {
                base_url: Some(base_url.to_string()),
                model: Some(model.into()),
                ..BackendSpec::default()
            },
        )
    }

    pub fn from_spec(name: impl Into<String>, spec: &BackendSpec) -> Result<Self> {
        let name = name.into();
        let base = spec
            .base_url
            .as_deref()
            .ok_or_else(|| Error::Config(format!("backend `{name}` has no base_url")))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(spec.timeout_ms))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let api_key = match &spec.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("environment variable {var} for backend `{name}` is unset"))
            })?),
            None => None,
        };
        Ok(Self {
            url: format!("{}/chat/completions", base.trim_end_matches('/')),
            model: spec.model.clone().unwrap_or_default(),
            client,
            api_key,
            retries: spec.retries,
            backoff: Duration::from_millis(200),
            gate: Gate::new(spec.max_in_flight),
            name,
        })
    }

    /// Base delay of the exponential backoff between retries.
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    fn attempt(&self, prompt: &str) -> Result<String, BackendError> {
        let _pass = self.gate.enter();
        let mut req = self.client.post(&self.url).json(&ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: resp.text().unwrap_or_default(),
            });
        }
        let body: ChatResponse = resp
            .json()
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        body.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::Malformed("no choices".into()))
    }
}

impl LanguageModel for HttpBackend {
    fn complete(&self, _role: Role, prompt: &str) -> Result<String, BackendError> {
        let mut attempt = 0;
        loop {
            match self.attempt(prompt) {
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    std::thread::sleep(self.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Role → backend table, complete for every completion role.
#[derive(Clone)]
pub struct Router {
    routes: BTreeMap<Role, Arc<dyn LanguageModel>>,
}

impl fmt::Debug for Router {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map()
            .entries(self.routes.iter().map(|(r, b)| (r, b.name())))
            .finish()
    }
}

impl Router {
    /// Every role served by one backend.
    pub fn single(backend: Arc<dyn LanguageModel>) -> Self {
        Self {
            routes: Role::COMPLETION
                .into_iter()
                .map(|r| (r, backend.clone()))
                .collect(),
        }
    }

    /// Fails naming the first completion role left without a backend.
    pub fn new(routes: BTreeMap<Role, Arc<dyn LanguageModel>>) -> Result<Self> {
        if let Some(missing) = Role::COMPLETION.iter().find(|r| !routes.contains_key(r)) {
            return Err(Error::Config(format!(
                "no backend configured for role `{missing}`"
            )));
        }
        Ok(Self { routes })
    }

    pub fn route(&self, role: Role) -> Result<Arc<dyn LanguageModel>> {
        self.routes
            .get(&role)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no backend configured for role `{role}`")))
    }

    pub fn complete(&self, role: Role, prompt: &str) -> Result<String, Error> {
        Ok(self.route(role)?.complete(role, prompt)?)
    }

    /// Builds backends and the embedder named by `cfg`.
    ///
    /// The `embed` role may name the built-in `hash` embedder, which is also
    /// used when neither `route.embed` nor an embeddings-kind default exists.
    pub fn from_config(cfg: &Config) -> Result<(Router, Arc<dyn Embedder>)> {
        let mut built: BTreeMap<String, Arc<dyn LanguageModel>> = BTreeMap::new();
        let mut routes = BTreeMap::new();
        for role in Role::COMPLETION {
            let name = cfg.route_for(role.as_str()).ok_or_else(|| {
                Error::Config(format!("no backend configured for role `{role}`"))
            })?;
            if !built.contains_key(name) {
                let spec = cfg.backends.get(name).ok_or_else(|| {
                    Error::Config(format!("role `{role}` routes to undefined backend `{name}`"))
                })?;
                let backend: Arc<dyn LanguageModel> = match spec.kind.as_str() {
                    "chat" => Arc::new(HttpBackend::from_spec(name, spec)?),
                    "scripted" => {
                        let path = spec.fixture.as_deref().ok_or_else(|| {
                            Error::Config(format!("scripted backend `{name}` needs a fixture"))
                        })?;
                        Arc::new(ScriptedBackend::named(name, ScriptFixture::load(path)?))
                    }
                    other => {
                        return Err(Error::Config(format!(
                            "backend `{name}` of kind `{other}` cannot serve `{role}`"
                        )))
                    }
                };
                built.insert(name.to_string(), backend);
            }
            routes.insert(role, built[name].clone());
        }
        let embed_name = cfg.routes.get("embed").map(String::as_str).or_else(|| {
            cfg.routes
                .get("default")
                .filter(|d| cfg.backends.get(*d).is_some_and(|s| s.kind == "embeddings"))
                .map(String::as_str)
        });
        let embedder: Arc<dyn Embedder> = match embed_name {
            None | Some("hash") => Arc::new(HashEmbedder::new(cfg.d_embed)?),
            Some(name) => {
                let spec = cfg.backends.get(name).ok_or_else(|| {
                    Error::Config(format!("role `embed` routes to undefined backend `{name}`"))
                })?;
                match spec.kind.as_str() {
                    "hash" => Arc::new(HashEmbedder::new(cfg.d_embed)?),
                    "embeddings" => {
                        let url = spec.base_url.as_deref().ok_or_else(|| {
                            Error::Config(format!("backend `{name}` has no base_url"))
                        })?;
                        let key = spec.api_key_env.as_deref().and_then(|v| std::env::var(v).ok());
                        Arc::new(RemoteEmbedder::new(
                            url,
                            spec.model.clone().unwrap_or_default(),
                            cfg.d_embed,
                            Duration::from_millis(spec.timeout_ms),
                            key,
                        )?)
                    }
                    other => {
                        return Err(Error::Config(format!(
                            "backend `{name}` of kind `{other}` cannot serve `embed`"
                        )))
                    }
                }
            }
        };
        Ok((Router::new(routes)?, embedder))
    }
}
