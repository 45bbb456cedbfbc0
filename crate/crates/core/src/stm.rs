//! Short-term memory: a bounded working set with decaying activations.
//!
//! Entries enter at activation `a0`. Each engine step multiplies every
//! activation by `λ`; an entry whose activation drops below `τ` is evicted
//! unless it was recalled (reset to `a0`) in the meantime. With `λ < 1` an
//! unrecalled entry therefore lives for `⌊ln(τ/a0)/ln λ⌋` ticks.

use serde::{Deserialize, Serialize};

use crate::store::KnowledgeId;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StmSource {
    Knowledge(KnowledgeId),
    /// Intermediate results and rejected responses, keyed by their text.
    Literal(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StmEntry {
    pub source: StmSource,
    pub content: String,
    pub activation: f64,
    pub inserted_step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StmConfig {
    pub a0: f64,
    pub lambda: f64,
    pub tau: f64,
    pub capacity: usize,
    pub char_budget: usize,
}

impl Default for StmConfig {
    fn default() -> Self {
        Self {
            a0: 1.0,
            lambda: 0.8,
            tau: 0.2,
            capacity: 32,
            char_budget: 4000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShortTermMemory {
    cfg: StmConfig,
    entries: Vec<StmEntry>,
    clock: u64,
}

impl ShortTermMemory {
    pub fn new(cfg: StmConfig) -> Self {
        Self {
            cfg,
            entries: Vec::new(),
            clock: 0,
        }
    }

    pub fn config(&self) -> &StmConfig {
        &self.cfg
    }

    /// Inserts or refreshes the entry for `source`. Empty content is ignored.
    pub fn add(&mut self, source: StmSource, content: impl Into<String>) {
        let content = content.into();
        if content.is_empty() {
            return;
        }
        self.clock += 1;
        if let Some(e) = self.entries.iter_mut().find(|e| e.source == source) {
            e.content = content;
            e.activation = self.cfg.a0;
            e.inserted_step = self.clock;
            return;
        }
        self.entries.push(StmEntry {
            source,
            content,
            activation: self.cfg.a0,
            inserted_step: self.clock,
        });
        while self.entries.len() > self.cfg.capacity {
            let weakest = self
                .entries
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    a.activation
                        .total_cmp(&b.activation)
                        .then(a.inserted_step.cmp(&b.inserted_step))
                })
                .map(|(i, _)| i)
                .expect("nonempty");
            self.entries.remove(weakest);
        }
    }

    /// Decays every activation once and returns the evicted entries.
    pub fn tick(&mut self) -> Vec<StmEntry> {
        for e in &mut self.entries {
            e.activation *= self.cfg.lambda;
        }
        let tau = self.cfg.tau;
        let (keep, evicted): (Vec<_>, Vec<_>) =
            self.entries.drain(..).partition(|e| e.activation >= tau);
        self.entries = keep;
        evicted
    }

    pub fn recall(&mut self, source: &StmSource) -> bool {
        match self.entries.iter_mut().find(|e| &e.source == source) {
            Some(e) => {
                e.activation = self.cfg.a0;
                true
            }
            None => false,
        }
    }

    /// Entries by activation (newest first on ties), cut at the character budget.
    pub fn ranked(&self) -> Vec<&StmEntry> {
        let mut ranked: Vec<&StmEntry> = self.entries.iter().collect();
        ranked.sort_by(|a, b| {
            b.activation
                .total_cmp(&a.activation)
                .then(b.inserted_step.cmp(&a.inserted_step))
        });
        let mut used = 0;
        ranked
            .into_iter()
            .take_while(|e| {
                used += e.content.chars().count();
                used <= self.cfg.char_budget
            })
            .collect()
    }

    pub fn snapshot(&self) -> Vec<String> {
        self.ranked().into_iter().map(|e| e.content.clone()).collect()
    }

    pub fn entries(&self) -> &[StmEntry] {
        &self.entries
    }

    pub fn get(&self, source: &StmSource) -> Option<&StmEntry> {
        self.entries.iter().find(|e| &e.source == source)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
