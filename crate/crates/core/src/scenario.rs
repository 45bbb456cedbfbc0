//! Offline scenarios: scripted model replies bundled with canned search
//! results, documents and seed knowledge, loaded from one JSON file.
//!
//! ```json
//! {
//!   "rules": [{"role": "coordinate", "contains": "Query: hi", "reply": "[]"}],
//!   "search": [{"contains": "hi", "results": [{"desc": "d", "url": "https://x/"}]}],
//!   "documents": [{"url": "https://x/", "content_type": "text/html", "body": "<p>..</p>"}],
//!   "knowledge": [{"context": "greeting", "value": "hello"}]
//! }
//! ```

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{Router, ScriptFixture, ScriptedBackend};
use crate::config::Config;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::store::{KnowledgeId, Store};
use crate::web::{FixtureFetcher, FixtureSearch, SearchResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchFixture {
    pub contains: String,
    pub results: Vec<SearchResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentFixture {
    pub url: String,
    pub content_type: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub context: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(flatten)]
    pub script: ScriptFixture,
    #[serde(default)]
    pub search: Vec<SearchFixture>,
    #[serde(default)]
    pub documents: Vec<DocumentFixture>,
    #[serde(default)]
    pub knowledge: Vec<Seed>,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("scenario {}: {e}", path.display())))
    }

    pub fn parse(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn web(&self) -> FixtureSearch {
        self.search
            .iter()
            .fold(FixtureSearch::new(), |w, s| w.with(&s.contains, s.results.clone()))
    }

    pub fn fetcher(&self) -> FixtureFetcher {
        self.documents.iter().fold(FixtureFetcher::new(), |f, d| {
            f.with(&d.url, &d.content_type, d.body.as_bytes())
        })
    }

    /// Adds the seed knowledge to `store`.
    pub fn seed(&self, store: &Store) -> Result<Vec<KnowledgeId>> {
        self.knowledge
            .iter()
            .map(|s| store.create(&s.context, &s.value))
            .collect()
    }

    /// An engine over `store` answering from this scenario. The returned
    /// backend records every prompt it was sent.
    pub fn engine(&self, store: Arc<Store>, config: Config) -> (Engine, Arc<ScriptedBackend>) {
        let backend = Arc::new(ScriptedBackend::named("scenario", self.script.clone()));
        let engine = Engine::new(store, Router::single(backend.clone()), config)
            .with_web_search(Arc::new(self.web()))
            .with_fetcher(Arc::new(self.fetcher()));
        (engine, backend)
    }
}
