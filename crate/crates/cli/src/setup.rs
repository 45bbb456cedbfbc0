//! Builds an engine from a config file, a store path and optionally an
//! offline scenario.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use metamem::scenario::Scenario;
use metamem::web::{HttpFetcher, HttpSearch};
use metamem::{Config, Engine, HashEmbedder, Router, Store};

pub fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    let cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// A store at `path` (in memory when `None`) with the configured embedder.
pub fn open_store(cfg: &Config, path: Option<&Path>) -> anyhow::Result<Arc<Store>> {
    // memory commands work without any model backend configured
    let embedder: Arc<dyn metamem::Embedder> = if cfg.routes.is_empty() {
        Arc::new(HashEmbedder::new(cfg.d_embed)?)
    } else {
        Router::from_config(cfg)?.1
    };
    open_with(path, embedder)
}

fn open_with(
    path: Option<&Path>,
    embedder: Arc<dyn metamem::Embedder>,
) -> anyhow::Result<Arc<Store>> {
    Ok(Arc::new(match path {
        Some(p) => Store::open(p, embedder)?,
        None => Store::in_memory(embedder),
    }))
}

/// An engine answering from `scenario`, or from the configured backends.
///
/// Scenario knowledge is only seeded into an empty store.
pub fn engine(
    cfg: Config,
    store_path: Option<&Path>,
    scenario: Option<&Path>,
) -> anyhow::Result<Engine> {
    if let Some(path) = scenario {
        let scenario = Scenario::load(path)?;
        let store = open_with(store_path, Arc::new(HashEmbedder::new(cfg.d_embed)?))?;
        if store.is_empty() {
            scenario.seed(&store)?;
        }
        return Ok(scenario.engine(store, cfg).0);
    }
    let (router, embedder) = Router::from_config(&cfg)?;
    let store = open_with(store_path, embedder)?;
    let timeout = Duration::from_secs(30);
    let mut engine = Engine::new(store, router, cfg.clone())
        .with_fetcher(Arc::new(HttpFetcher::new(timeout)?));
    if let Some(url) = &cfg.search_base_url {
        engine = engine.with_web_search(Arc::new(HttpSearch::new(url.clone(), timeout)?));
    }
    Ok(engine)
}
