//! Long-term memory.
//!
//! Knowledge triples live in an in-memory map guarded by a reader-writer
//! lock. A store opened on a path also appends every mutation to a JSON-lines
//! log and replays it on open; [`Store::export`] compacts that log.
//!
//! The export format is one JSON object per line:
//!
//! ```json
//! {"id":1,"context":"capital of France","value":"Paris","A":[[1.0,0.0],[0.0,1.0]],"b":[0.0,0.0],"score":0.5,"selections":0,"created_step":1,"updated_step":1}
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, Vector};
use crate::error::{Error, Result};
use crate::filter::{FilterExpr, Filterable};
use crate::metabolism::{self, ContextFeature, CredibilityState, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KnowledgeId(pub u64);

impl fmt::Display for KnowledgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for KnowledgeId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        s.parse().map(KnowledgeId)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeTriple {
    pub id: KnowledgeId,
    pub context: String,
    pub key: Vector,
    pub value: String,
    pub cred: CredibilityState,
    pub created_step: u64,
    pub updated_step: u64,
}

impl Filterable for KnowledgeTriple {
    fn context(&self) -> &str {
        &self.context
    }
    fn value(&self) -> &str {
        &self.value
    }
    fn score(&self) -> f64 {
        self.cred.score()
    }
}

/// One line of the persistence format.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: KnowledgeId,
    context: String,
    value: String,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    score: f64,
    selections: u64,
    created_step: u64,
    updated_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Tombstone {
    deleted: KnowledgeId,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LogLine {
    Put(Record),
    Delete(Tombstone),
}

impl Record {
    fn of(t: &KnowledgeTriple) -> Self {
        Self {
            id: t.id,
            context: t.context.clone(),
            value: t.value.clone(),
            a: t.cred.a().to_rows(),
            b: t.cred.b().to_vec(),
            score: t.cred.score(),
            selections: t.cred.selections(),
            created_step: t.created_step,
            updated_step: t.updated_step,
        }
    }
}

#[derive(Debug, Default)]
struct Inner {
    records: BTreeMap<KnowledgeId, KnowledgeTriple>,
    next_id: u64,
    step: u64,
}

impl Inner {
    fn tick(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    fn absorb(&mut self, t: KnowledgeTriple) {
        self.next_id = self.next_id.max(t.id.0 + 1);
        self.step = self.step.max(t.updated_step).max(t.created_step);
        self.records.insert(t.id, t);
    }
}

pub struct Store {
    embedder: Arc<dyn Embedder>,
    inner: RwLock<Inner>,
    log: Option<(PathBuf, Mutex<File>)>,
}

impl fmt::Debug for Store {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Store")
            .field("len", &self.len())
            .field("log", &self.log.as_ref().map(|(p, _)| p))
            .finish()
    }
}

impl Store {
    /// A volatile store.
    pub fn in_memory(embedder: Arc<dyn Embedder>) -> Self {
        Self {
            embedder,
            inner: RwLock::new(Inner {
                next_id: 1,
                ..Inner::default()
            }),
            log: None,
        }
    }

    /// Opens (or creates) a log-backed store, replaying existing entries.
    pub fn open(path: impl AsRef<Path>, embedder: Arc<dyn Embedder>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut store = Self::in_memory(embedder);
        if path.exists() {
            let lines = read_lines(&path)?;
            let mut inner = store.write();
            for (n, line) in lines {
                match serde_json::from_str::<LogLine>(&line) {
                    Ok(LogLine::Put(r)) => {
                        let t = store.triple_of(r).map_err(|e| import_err(n, e))?;
                        inner.absorb(t);
                    }
                    Ok(LogLine::Delete(d)) => {
                        inner.records.remove(&d.deleted);
                        inner.next_id = inner.next_id.max(d.deleted.0 + 1);
                    }
                    Err(e) => return Err(import_err(n, e)),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        store.log = Some((path, Mutex::new(file)));
        Ok(store)
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    /// Feature dimension of every arm in this store.
    pub fn d_feat(&self) -> usize {
        2 * self.embedder.dim()
    }

    fn read(&self) -> RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }

    fn append(&self, line: &impl Serialize) -> Result<()> {
        if let Some((_, file)) = &self.log {
            let mut file = file.lock().unwrap_or_else(|e| e.into_inner());
            let mut s = serde_json::to_string(line).map_err(std::io::Error::other)?;
            s.push('\n');
            file.write_all(s.as_bytes())?;
            file.flush()?;
        }
        Ok(())
    }

    fn triple_of(&self, r: Record) -> Result<KnowledgeTriple> {
        let d = self.d_feat();
        if r.a.len() != d {
            return Err(Error::Domain(format!(
                "A is {}x?, expected {d}x{d}",
                r.a.len()
            )));
        }
        if r.a.iter().enumerate().any(|(i, row)| {
            row.iter()
                .enumerate()
                .any(|(j, v)| r.a.get(j).and_then(|rj| rj.get(i)) != Some(v))
        }) {
            return Err(Error::Domain("A is not symmetric".into()));
        }
        let cred = CredibilityState::from_parts(Matrix::from_rows(r.a)?, r.b, r.score, r.selections)?;
        Ok(KnowledgeTriple {
            id: r.id,
            key: self.embedder.embed(&r.context)?,
            context: r.context,
            value: r.value,
            cred,
            created_step: r.created_step,
            updated_step: r.updated_step,
        })
    }

    pub fn create(&self, context: &str, value: &str) -> Result<KnowledgeId> {
        if context.is_empty() {
            return Err(Error::Domain("context must be nonempty".into()));
        }
        let key = self.embedder.embed(context)?;
        let mut inner = self.write();
        let id = KnowledgeId(inner.next_id);
        let step = inner.tick();
        let t = KnowledgeTriple {
            id,
            context: context.to_string(),
            key,
            value: value.to_string(),
            cred: CredibilityState::fresh(self.d_feat()),
            created_step: step,
            updated_step: step,
        };
        self.append(&Record::of(&t))?;
        inner.absorb(t);
        Ok(id)
    }

    pub fn get(&self, id: KnowledgeId) -> Result<KnowledgeTriple> {
        self.read().records.get(&id).cloned().ok_or(Error::NotFound(id))
    }

    pub fn contains(&self, id: KnowledgeId) -> bool {
        self.read().records.contains_key(&id)
    }

    /// Replaces the given fields and resets credibility to cold start.
    pub fn update(
        &self,
        id: KnowledgeId,
        new_context: Option<&str>,
        new_value: Option<&str>,
    ) -> Result<()> {
        if new_context == Some("") {
            return Err(Error::Domain("context must be nonempty".into()));
        }
        let key = new_context.map(|c| self.embedder.embed(c)).transpose()?;
        let d_feat = self.d_feat();
        let mut inner = self.write();
        if !inner.records.contains_key(&id) {
            return Err(Error::NotFound(id));
        }
        let step = inner.tick();
        let t = inner.records.get_mut(&id).expect("checked above");
        let mut next = t.clone();
        if let (Some(c), Some(k)) = (new_context, key) {
            next.context = c.to_string();
            next.key = k;
        }
        if let Some(v) = new_value {
            next.value = v.to_string();
        }
        next.cred = CredibilityState::fresh(d_feat);
        next.updated_step = step;
        self.append(&Record::of(&next))?;
        *t = next;
        Ok(())
    }

    pub fn delete(&self, id: KnowledgeId) -> Result<()> {
        let mut inner = self.write();
        if !inner.records.contains_key(&id) {
            return Err(Error::NotFound(id));
        }
        self.append(&Tombstone { deleted: id })?;
        inner.records.remove(&id);
        inner.tick();
        Ok(())
    }

    /// Applies one bandit update to a triple's credibility; returns the new score.
    pub fn apply_payoff(
        &self,
        id: KnowledgeId,
        x: &ContextFeature,
        r: f64,
        eta: f64,
    ) -> Result<f64> {
        let r = r.clamp(-1.0, 1.0);
        let mut inner = self.write();
        let t = inner.records.get_mut(&id).ok_or(Error::NotFound(id))?;
        let mut cred = t.cred.clone();
        metabolism::update(&mut cred, x, r, eta)?;
        let score = cred.score();
        t.cred = cred;
        let rec = Record::of(t);
        self.append(&rec)?;
        Ok(score)
    }

    /// All triples satisfying `filter`, most recently updated first.
    pub fn keyword_search(&self, filter: &FilterExpr) -> Vec<KnowledgeTriple> {
        let mut hits: Vec<KnowledgeTriple> = self
            .read()
            .records
            .values()
            .filter(|t| filter.matches(*t))
            .cloned()
            .collect();
        hits.sort_by(|a, b| b.updated_step.cmp(&a.updated_step).then(a.id.cmp(&b.id)));
        hits
    }

    /// Every triple in id order.
    pub fn list(&self) -> Vec<KnowledgeTriple> {
        self.read().records.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.read().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs `f` over the records under a read lock.
    pub fn with_records<R>(&self, f: impl FnOnce(&mut dyn Iterator<Item = &KnowledgeTriple>) -> R) -> R {
        let inner = self.read();
        let mut it = inner.records.values();
        f(&mut it)
    }

    /// Writes a compacted snapshot to `path` and compacts the store's own log.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<usize> {
        let inner = self.read();
        write_snapshot(path.as_ref(), inner.records.values())?;
        if let Some((log_path, file)) = &self.log {
            let mut file = file.lock().unwrap_or_else(|e| e.into_inner());
            let tmp = log_path.with_extension("compact");
            write_snapshot(&tmp, inner.records.values())?;
            fs::rename(&tmp, log_path)?;
            *file = OpenOptions::new().append(true).open(log_path)?;
        }
        Ok(inner.records.len())
    }

    /// Loads every record of `path`; nothing is applied unless all lines parse.
    pub fn import(&self, path: impl AsRef<Path>) -> Result<usize> {
        let mut parsed = Vec::new();
        for (n, line) in read_lines(path.as_ref())? {
            let r: Record = serde_json::from_str(&line).map_err(|e| import_err(n, e))?;
            parsed.push(self.triple_of(r).map_err(|e| import_err(n, e))?);
        }
        let mut inner = self.write();
        for t in &parsed {
            self.append(&Record::of(t))?;
        }
        let count = parsed.len();
        for t in parsed {
            inner.absorb(t);
        }
        Ok(count)
    }
}

fn import_err(line: usize, e: impl fmt::Display) -> Error {
    Error::Import {
        line,
        message: e.to_string(),
    }
}

/// Nonblank lines with 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn write_snapshot<'a>(path: &Path, records: impl Iterator<Item = &'a KnowledgeTriple>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in records {
        serde_json::to_writer(&mut w, &Record::of(t)).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
