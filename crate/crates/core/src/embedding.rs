//! Text embeddings used as knowledge keys and bandit features.
//!
//! Two implementations share the [`Embedder`] trait: [`HashEmbedder`] is a
//! pure function of its input (signed feature hashing of character trigrams),
//! [`RemoteEmbedder`] calls an HTTP embeddings endpoint. A store must be
//! populated by a single embedder so that keys stay comparable.

use std::hash::Hasher;
use std::time::Duration;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::backend::BackendError;
use crate::error::{Error, Result};

/// A dense, finite real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("vector must have positive dimension".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("vector has non-finite component".into()));
        }
        Ok(Self(values))
    }

    /// The `index`-th standard basis vector of dimension `dim`.
    pub fn basis(dim: usize, index: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[index] = 1.0;
        Self(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Scales to unit length; `None` for the zero vector.
    pub fn normalized(&self) -> Option<Vector> {
        let n = self.norm();
        if n == 0.0 {
            return None;
        }
        Some(Vector(self.0.iter().map(|v| v / n).collect()))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two nonzero vectors of equal dimension.
pub fn cosine(a: &Vector, b: &Vector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Domain(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine of a zero vector".into()));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedderKind {
    DeterministicHash,
    RemoteModel,
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vector>;
    fn dim(&self) -> usize;
    fn kind(&self) -> EmbedderKind;
}

/// Signed feature hashing of lowercase character trigrams.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    const NGRAM: usize = 3;

    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config("d_embed must be at least 2".into()));
        }
        Ok(Self { dim })
    }

    /// Infallible form of [`Embedder::embed`].
    pub fn vector(&self, text: &str) -> Vector {
        if text.is_empty() {
            return Vector::basis(self.dim, 0);
        }
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        let mut acc = vec![0.0; self.dim];
        let mut add = |gram: &[char]| {
            let mut h = FnvHasher::default();
            for c in gram {
                h.write_u32(*c as u32);
            }
            let h = h.finish();
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        };
        if chars.len() < Self::NGRAM {
            add(&chars);
        } else {
            chars.windows(Self::NGRAM).for_each(&mut add);
        }
        // signed collisions can cancel every bucket
        Vector(acc)
            .normalized()
            .unwrap_or_else(|| Vector::basis(self.dim, 0))
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vector> {
        Ok(self.vector(text))
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> EmbedderKind {
        EmbedderKind::DeterministicHash
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a str,
    model: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

/// Client for a generic `{input, model} -> {embedding}` endpoint.
pub struct RemoteEmbedder {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    dim: usize,
    api_key: Option<String>,
}

impl RemoteEmbedder {
    pub fn new(
        url: impl Into<String>,
        model: impl Into<String>,
        dim: usize,
        timeout: Duration,
        api_key: Option<String>,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            client,
            url: url.into(),
            model: model.into(),
            dim,
            api_key,
        })
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Vector> {
        if text.is_empty() {
            return Ok(Vector::basis(self.dim, 0));
        }
        let mut req = self.client.post(&self.url).json(&EmbedRequest {
            input: text,
            model: &self.model,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let body: EmbedResponse = resp
            .json()
            .map_err(|e| BackendError::Transport(format!("malformed embedding response: {e}")))?;
        if body.embedding.len() != self.dim {
            return Err(Error::Config(format!(
                "remote embedding has dimension {}, configured d_embed is {}",
                body.embedding.len(),
                self.dim
            )));
        }
        let v = Vector::new(body.embedding)?;
        v.normalized()
            .ok_or_else(|| Error::Domain("remote model returned a zero embedding".into()))
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> EmbedderKind {
        EmbedderKind::RemoteModel
    }
}
