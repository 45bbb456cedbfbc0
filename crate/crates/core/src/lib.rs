//! Long-term memory with credibility tracking, a short-term working set and
//! a recursive operator engine that answers queries over both.
//!
//! The main entry points are [`Store`] for knowledge triples, [`Engine`] for
//! running queries and [`metabolism`] for the credibility bandit.

pub mod backend;
pub mod bench;
pub mod config;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod extract;
pub mod filter;
pub mod metabolism;
pub mod operators;
pub mod prompts;
pub mod retrieval;
pub mod scenario;
pub mod stm;
pub mod store;
pub mod web;

pub use backend::{LanguageModel, Role, Router};
pub use config::Config;
pub use embedding::{Embedder, HashEmbedder, Vector};
pub use engine::{Command, Engine, Operator, RunOptions, RunResult, Trace};
pub use error::{Error, Result};
pub use filter::FilterExpr;
pub use stm::ShortTermMemory;
pub use store::{KnowledgeId, KnowledgeTriple, Store};
