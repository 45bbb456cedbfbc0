//! External search and document fetching used by the searcher and browser.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub desc: String,
    pub url: String,
}

pub trait WebSearch: Send + Sync {
    fn search(&self, query: &str) -> Result<Vec<SearchResult>>;
}

/// No external search; memory results only.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoWebSearch;

impl WebSearch for NoWebSearch {
    fn search(&self, _query: &str) -> Result<Vec<SearchResult>> {
        Ok(Vec::new())
    }
}

/// Canned results keyed by query substring; first match wins.
#[derive(Debug, Clone, Default)]
pub struct FixtureSearch {
    rules: Vec<(String, Vec<SearchResult>)>,
}

impl FixtureSearch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, contains: impl Into<String>, results: Vec<SearchResult>) -> Self {
        self.rules.push((contains.into(), results));
        self
    }
}

impl WebSearch for FixtureSearch {
    fn search(&self, query: &str) -> Result<Vec<SearchResult>> {
        Ok(self
            .rules
            .iter()
            .find(|(k, _)| query.contains(k.as_str()))
            .map(|(_, r)| r.clone())
            .unwrap_or_default())
    }
}

/// `GET {base_url}?q=<query>` returning a JSON array of `{desc, url}`.
pub struct HttpSearch {
    client: reqwest::blocking::Client,
    base_url: String,
}

impl HttpSearch {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            client,
            base_url: base_url.into(),
        })
    }
}

impl WebSearch for HttpSearch {
    fn search(&self, query: &str) -> Result<Vec<SearchResult>> {
        let fail = |e: reqwest::Error| Error::Fetch {
            path: self.base_url.clone(),
            message: e.to_string(),
        };
        self.client
            .get(&self.base_url)
            .query(&[("q", query)])
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(fail)?
            .json()
            .map_err(fail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub content_type: String,
    pub body: Vec<u8>,
}

pub trait Fetcher: Send + Sync {
    fn fetch(&self, url: &str) -> Result<Document>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoFetcher;

impl Fetcher for NoFetcher {
    fn fetch(&self, url: &str) -> Result<Document> {
        Err(Error::Fetch {
            path: url.to_string(),
            message: "network fetching is not configured".into(),
        })
    }
}

/// Serves documents from memory by exact URL.
#[derive(Debug, Clone, Default)]
pub struct FixtureFetcher {
    docs: BTreeMap<String, Document>,
}

impl FixtureFetcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, url: impl Into<String>, content_type: &str, body: impl Into<Vec<u8>>) -> Self {
        self.docs.insert(
            url.into(),
            Document {
                content_type: content_type.to_string(),
                body: body.into(),
            },
        );
        self
    }
}

impl Fetcher for FixtureFetcher {
    fn fetch(&self, url: &str) -> Result<Document> {
        self.docs.get(url).cloned().ok_or_else(|| Error::Fetch {
            path: url.to_string(),
            message: "no such fixture document".into(),
        })
    }
}

pub struct HttpFetcher {
    client: reqwest::blocking::Client,
}

impl HttpFetcher {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self { client })
    }
}

impl Fetcher for HttpFetcher {
    fn fetch(&self, url: &str) -> Result<Document> {
        let fail = |e: reqwest::Error| Error::Fetch {
            path: url.to_string(),
            message: e.to_string(),
        };
        let resp = self
            .client
            .get(url)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(fail)?;
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("text/html")
            .to_string();
        let body = resp.bytes().map_err(fail)?.to_vec();
        Ok(Document { content_type, body })
    }
}
