//! Desk-scale evaluation protocols over synthetic data.
//!
//! Three protocols, each a pure function of its parameters and seed:
//!
//! - [`bench_reasoning`]: multi-hop questions over fact chains held in
//!   memory, answered once by a planner that decomposes the question and once
//!   by a planner that retrieves and answers directly.
//! - [`bench_metabolism`]: true statements and counterfactuals that start
//!   with equal credibility, judged by an oracle for a number of epochs.
//! - [`bench_manipulation`]: create, update and delete facts, then check
//!   what the engine answers.
//!
//! The language model is replaced by [`Oracle`], a rule-based backend that
//! only reads the prompt it is given. Its responder answers single-hop
//! questions of the form `What is the R of E?` and nothing else.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, FnBackend, Role, Router};
use crate::config::Config;
use crate::embedding::HashEmbedder;
use crate::engine::{Command, Engine, Operator, RunOptions};
use crate::error::{Error, Result};
use crate::metabolism::{self, feature};
use crate::operators::NONE_SENTINEL;
use crate::retrieval::vector_search;
use crate::store::{KnowledgeId, Store};

const SYLLABLES: [&str; 16] = [
    "ka", "vo", "ru", "mi", "zel", "tor", "an", "is", "qu", "bel", "dra", "nox", "pel", "sim",
    "ur", "yen",
];

const RELATIONS: [&str; 10] = [
    "mentor", "rival", "employer", "founder", "sponsor", "landlord", "publisher", "advisor",
    "neighbor", "patron",
];

const REJECTED: &str = "Rejected response";

/// Unique capitalized pseudo-words.
struct Names {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

impl Names {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used: BTreeSet::new(),
        }
    }

    fn entity(&mut self) -> String {
        loop {
            let n = self.rng.gen_range(3..=4);
            let mut s: String = (0..n)
                .map(|_| *SYLLABLES.choose(&mut self.rng).expect("nonempty"))
                .collect();
            s[..1].make_ascii_uppercase();
            if self.used.insert(s.clone()) {
                return s;
            }
        }
    }

    fn relation(&mut self) -> &'static str {
        RELATIONS.choose(&mut self.rng).expect("nonempty")
    }
}

fn phrase(relation: &str, subject: &str) -> String {
    format!("the {relation} of {subject}")
}

fn question(phrase: &str) -> String {
    format!("What is {phrase}?")
}

fn phrase_of(question: &str) -> Option<&str> {
    question.trim().strip_prefix("What is ")?.strip_suffix('?')
}

/// Reads a JSON string array at the start of `s`, returning it and the rest.
fn leading_list(s: &str) -> Option<(Vec<String>, &str)> {
    let mut stream = serde_json::Deserializer::from_str(s).into_iter::<Vec<String>>();
    let list = stream.next()?.ok()?;
    Some((list, &s[stream.byte_offset()..]))
}

/// `"context: value"` lines as a lookup table.
fn known(context: &[String]) -> HashMap<&str, &str> {
    context.iter().filter_map(|c| c.split_once(": ")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Planner {
    /// Resolves the innermost known hop and searches for the next one.
    Decompose,
    /// One search, then answer the question as asked.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Judge {
    /// Accepts a response only if it is the true value.
    Gold,
    /// Accepts any response other than `"None"`.
    Answered,
}

/// Rule-based stand-in for a language model.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub planner: Planner,
    pub judge: Judge,
    /// Ground truth, phrase to value.
    pub facts: HashMap<String, String>,
    /// Facts the responder "knows" without being shown them.
    pub intrinsic: HashMap<String, String>,
}

impl Oracle {
    pub fn new(planner: Planner, judge: Judge, facts: HashMap<String, String>) -> Self {
        Self {
            planner,
            judge,
            facts,
            intrinsic: HashMap::new(),
        }
    }

    pub fn reply(&self, role: Role, prompt: &str) -> Result<String, BackendError> {
        let malformed = || BackendError::Malformed(format!("unexpected {role} prompt"));
        match role {
            Role::Coordinate => {
                let at = prompt.rfind("Context: ").ok_or_else(malformed)?;
                let (context, rest) =
                    leading_list(&prompt[at + "Context: ".len()..]).ok_or_else(malformed)?;
                let query = rest
                    .strip_prefix(" Query: ")
                    .and_then(|r| r.rsplit_once("\nYou should only"))
                    .map(|(q, _)| q)
                    .ok_or_else(malformed)?;
                Ok(serde_json::to_string(&self.plan(&context, query)).expect("serializes"))
            }
            Role::Respond => {
                let (context, rest) = prompt
                    .strip_prefix("Given the ")
                    .and_then(leading_list)
                    .ok_or_else(malformed)?;
                let query = rest
                    .strip_prefix(" and the user’s query ")
                    .and_then(|r| r.strip_suffix(", generate the response to the user."))
                    .ok_or_else(malformed)?;
                Ok(self.answer(&context, query))
            }
            Role::Discriminate => {
                let (_, rest) = prompt
                    .strip_prefix("Given the ")
                    .and_then(leading_list)
                    .ok_or_else(malformed)?;
                let (response, query) = rest
                    .strip_prefix(", check if the ")
                    .and_then(|r| r.strip_suffix('.'))
                    .and_then(|r| r.rsplit_once(" satisfies the "))
                    .ok_or_else(malformed)?;
                let valid = match self.judge {
                    Judge::Answered => response != NONE_SENTINEL,
                    Judge::Gold => phrase_of(query)
                        .and_then(|p| self.facts.get(p))
                        .is_some_and(|v| v == response),
                };
                Ok(if valid { "True" } else { "False" }.into())
            }
            Role::Summarize | Role::Embed => Err(malformed()),
        }
    }

    fn plan(&self, context: &[String], query: &str) -> Vec<Command> {
        if context.iter().any(|c| c.starts_with(REJECTED)) {
            return Vec::new();
        }
        let Some(mut p) = phrase_of(query).map(str::to_string) else {
            return Vec::new();
        };
        if self.planner == Planner::Direct {
            return vec![
                Command::new(Operator::Searcher).arg("query", &p),
                Command::new(Operator::Responder).arg("query", query),
            ];
        }
        let known = known(context);
        loop {
            let at = p.rfind("the ").unwrap_or(0);
            let inner = &p[at..];
            match known.get(inner) {
                Some(v) if at > 0 => p = format!("{}{v}", &p[..at]),
                Some(_) => return vec![Command::new(Operator::Responder).arg("query", question(&p))],
                None => {
                    let next = if at == 0 {
                        Command::new(Operator::Responder).arg("query", question(&p))
                    } else {
                        Command::new(Operator::Coordinator).arg("query", question(&p))
                    };
                    return vec![Command::new(Operator::Searcher).arg("query", inner), next];
                }
            }
        }
    }

    fn answer(&self, context: &[String], query: &str) -> String {
        let Some(p) = phrase_of(query) else {
            return NONE_SENTINEL.into();
        };
        if p.contains(" of the ") {
            return NONE_SENTINEL.into();
        }
        known(context)
            .get(p)
            .map(|v| v.to_string())
            .or_else(|| self.intrinsic.get(p).cloned())
            .unwrap_or_else(|| NONE_SENTINEL.into())
    }

    /// A router sending every role to this oracle.
    pub fn router(self) -> Router {
        let oracle = Arc::new(self);
        Router::single(Arc::new(FnBackend::new("oracle", move |role, prompt: &str| {
            oracle.reply(role, prompt)
        })))
    }
}

fn bench_store(cfg: &Config) -> Result<Arc<Store>> {
    Ok(Arc::new(Store::in_memory(Arc::new(HashEmbedder::new(
        cfg.d_embed,
    )?))))
}

fn ratio(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// A report written as `<protocol>.csv` and `<protocol>.txt`.
pub trait Report: Serialize + DeserializeOwned {
    const PROTOCOL: &'static str;

    fn summary(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningReport {
    pub cases: usize,
    pub hops: usize,
    pub seed: u64,
    pub accuracy_direct: f64,
    pub accuracy_decomposed: f64,
    pub mean_steps_decomposed: f64,
}

impl Report for ReasoningReport {
    const PROTOCOL: &'static str = "reasoning";

    fn summary(&self) -> String {
        format!(
            "reasoning: {} cases, {} hops, seed {}\n  direct      {:.2}\n  decomposed  {:.2} ({:.1} steps on average)\n",
            self.cases,
            self.hops,
            self.seed,
            self.accuracy_direct,
            self.accuracy_decomposed,
            self.mean_steps_decomposed
        )
    }
}

/// One synthetic multi-hop case: the question, its answer and the chain facts.
#[derive(Debug, Clone, PartialEq)]
pub struct HopCase {
    pub question: String,
    pub answer: String,
    pub facts: Vec<(String, String)>,
}

pub fn hop_cases(n: usize, hops: usize, seed: u64) -> Vec<HopCase> {
    let mut names = Names::new(seed);
    (0..n)
        .map(|_| {
            let mut subject = names.entity();
            let mut nested = subject.clone();
            let mut facts = Vec::with_capacity(hops);
            for _ in 0..hops {
                let rel = names.relation();
                let object = names.entity();
                facts.push((phrase(rel, &subject), object.clone()));
                nested = phrase(rel, &nested);
                subject = object;
            }
            HopCase {
                question: question(&nested),
                answer: subject,
                facts,
            }
        })
        .collect()
}

/// Multi-hop accuracy with and without decomposition. `hops` is 2 to 4.
pub fn bench_reasoning(n: usize, hops: usize, seed: u64) -> Result<ReasoningReport> {
    if !(2..=4).contains(&hops) {
        return Err(Error::Domain(format!("hops must be in 2..=4, got {hops}")));
    }
    let cases = hop_cases(n, hops, seed);
    let mut cfg = Config::default();
    // each hop costs a coordinator and a searcher level
    cfg.max_depth = 2 * hops + 2;
    let facts: HashMap<String, String> = cases.iter().flat_map(|c| c.facts.clone()).collect();

    let mut accuracy = [0.0; 2];
    let mut steps = 0;
    for (slot, planner) in [Planner::Direct, Planner::Decompose].into_iter().enumerate() {
        // verdicts move credibility, so each condition gets its own memory
        let store = bench_store(&cfg)?;
        for (context, value) in cases.iter().flat_map(|c| &c.facts) {
            store.create(context, value)?;
        }
        let router = Oracle::new(planner, Judge::Gold, facts.clone()).router();
        let engine = Engine::new(store, router, cfg.clone());
        let mut correct = 0;
        for case in &cases {
            let run = engine.run(&case.question, RunOptions::default())?;
            if planner == Planner::Decompose {
                steps += run.trace.records.len();
            }
            correct += usize::from(run.answer.as_deref() == Ok(case.answer.as_str()));
        }
        accuracy[slot] = ratio(correct, cases.len());
    }
    Ok(ReasoningReport {
        cases: n,
        hops,
        seed,
        accuracy_direct: accuracy[0],
        accuracy_decomposed: accuracy[1],
        mean_steps_decomposed: ratio(steps, cases.len()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetabolismReport {
    pub pairs: usize,
    pub epochs: usize,
    pub seed: u64,
    pub noise: f64,
    pub original_wins_ratio: f64,
    pub mean_original_score: f64,
    pub mean_counterfactual_score: f64,
    /// Fraction of final-epoch bandit selections that picked the original.
    pub original_selected_ratio: f64,
}

impl Report for MetabolismReport {
    const PROTOCOL: &'static str = "metabolism";

    fn summary(&self) -> String {
        format!(
            "metabolism: {} pairs, {} epochs, seed {}, verdict noise {:.2}\n  original wins      {:.2}\n  mean scores        {:.3} original / {:.3} counterfactual\n  original selected  {:.2} in the last epoch\n",
            self.pairs,
            self.epochs,
            self.seed,
            self.noise,
            self.original_wins_ratio,
            self.mean_original_score,
            self.mean_counterfactual_score,
            self.original_selected_ratio
        )
    }
}

/// Statement/counterfactual credibility divergence.
///
/// Every pair shares one context, so both statements start with the same key
/// and score. In each epoch every pair is queried once: its statements are
/// retrieved, the bandit picks one, and the oracle judges each retrieved
/// statement (+1 true, -1 counterfactual), flipping a verdict with
/// probability `noise`.
pub fn bench_metabolism(
    n_pairs: usize,
    epochs: usize,
    seed: u64,
    noise: f64,
) -> Result<MetabolismReport> {
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::Domain(format!("noise {noise} outside [0, 1]")));
    }
    let cfg = Config::default();
    let store = bench_store(&cfg)?;
    let mut names = Names::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut truth: HashMap<KnowledgeId, bool> = HashMap::new();
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let rel = names.relation();
        let context = phrase(rel, &names.entity());
        let original = store.create(&context, &names.entity())?;
        let counter = store.create(&context, &names.entity())?;
        truth.insert(original, true);
        truth.insert(counter, false);
        pairs.push((context, original, counter));
    }
    let embedder = store.embedder().clone();
    let mut picked_original = 0;
    for epoch in 0..epochs {
        for (context, original, _) in &pairs {
            let q = embedder.embed(context)?;
            let hits = vector_search(&store, &q, 2, cfg.min_score)?;
            let arms = hits
                .iter()
                .map(|h| {
                    let t = store.get(h.id)?;
                    Ok((t.id, feature(&q, &t.key)?, t))
                })
                .collect::<Result<Vec<_>>>()?;
            let candidates: Vec<_> = arms.iter().map(|(id, x, t)| (*id, &t.cred, x.clone())).collect();
            if epoch + 1 == epochs && metabolism::select(&candidates, cfg.alpha)? == *original {
                picked_original += 1;
            }
            for (id, x, _) in &arms {
                let mut verdict = truth[id];
                if rng.gen_bool(noise) {
                    verdict = !verdict;
                }
                let r = if verdict { 1.0 } else { -1.0 };
                store.apply_payoff(*id, x, r, cfg.eta)?;
            }
        }
    }
    let mut wins = 0;
    let (mut sum_o, mut sum_c) = (0.0, 0.0);
    for (_, o, c) in &pairs {
        let (so, sc) = (store.get(*o)?.cred.score(), store.get(*c)?.cred.score());
        wins += usize::from(so > sc);
        sum_o += so;
        sum_c += sc;
    }
    let n = pairs.len().max(1) as f64;
    Ok(MetabolismReport {
        pairs: n_pairs,
        epochs,
        seed,
        noise,
        original_wins_ratio: ratio(wins, pairs.len()),
        mean_original_score: sum_o / n,
        mean_counterfactual_score: sum_c / n,
        original_selected_ratio: if epochs == 0 {
            0.0
        } else {
            ratio(picked_original, pairs.len())
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipulationReport {
    pub facts: usize,
    pub seed: u64,
    pub intrinsic: bool,
    pub create_acc: f64,
    pub update_acc: f64,
    /// Residual-answer rate after deletion; lower is better.
    pub delete_acc: f64,
}

impl Report for ManipulationReport {
    const PROTOCOL: &'static str = "manipulation";

    fn summary(&self) -> String {
        format!(
            "manipulation: {} facts, seed {}{}\n  create  {:.2}\n  update  {:.2}\n  delete  {:.2} residual (lower is better)\n",
            self.facts,
            self.seed,
            if self.intrinsic { ", backend knows the originals" } else { "" },
            self.create_acc,
            self.update_acc,
            self.delete_acc
        )
    }
}

/// Create, update and delete `n_each` facts with a context-only backend.
pub fn bench_manipulation(n_each: usize, seed: u64) -> Result<ManipulationReport> {
    manipulation(n_each, seed, false)
}

/// As [`bench_manipulation`], but the backend also knows every original fact
/// without being shown it, so deleted facts can still be answered.
pub fn bench_manipulation_intrinsic(n_each: usize, seed: u64) -> Result<ManipulationReport> {
    manipulation(n_each, seed, true)
}

fn manipulation(n_each: usize, seed: u64, intrinsic: bool) -> Result<ManipulationReport> {
    if n_each == 0 {
        return Err(Error::Domain("n_each must be at least 1".into()));
    }
    let cfg = Config::default();
    let store = bench_store(&cfg)?;
    let mut names = Names::new(seed);
    let mut facts = Vec::with_capacity(n_each);
    for _ in 0..n_each {
        let rel = names.relation();
        facts.push((phrase(rel, &names.entity()), names.entity(), names.entity()));
    }
    // unrelated background knowledge
    for _ in 0..n_each {
        let rel = names.relation();
        store.create(&phrase(rel, &names.entity()), &names.entity())?;
    }
    let mut oracle = Oracle::new(Planner::Decompose, Judge::Answered, HashMap::new());
    if intrinsic {
        oracle.intrinsic = facts.iter().map(|(p, v, _)| (p.clone(), v.clone())).collect();
    }
    let engine = Engine::new(store.clone(), oracle.router(), cfg);
    let ask = |p: &str| -> Result<Option<String>> {
        Ok(engine.run(&question(p), RunOptions::default())?.answer.ok())
    };

    let mut ids = Vec::with_capacity(n_each);
    let mut created = 0;
    for (p, v, _) in &facts {
        ids.push(store.create(p, v)?);
        created += usize::from(ask(p)?.as_deref() == Some(v.as_str()));
    }
    let mut updated = 0;
    for ((p, _, new), id) in facts.iter().zip(&ids) {
        store.update(*id, None, Some(new))?;
        updated += usize::from(ask(p)?.as_deref() == Some(new.as_str()));
    }
    let mut residual = 0;
    for ((p, old, new), id) in facts.iter().zip(&ids) {
        store.delete(*id)?;
        let a = ask(p)?;
        residual += usize::from(a.as_deref() == Some(old.as_str()) || a.as_deref() == Some(new.as_str()));
    }
    Ok(ManipulationReport {
        facts: n_each,
        seed,
        intrinsic,
        create_acc: ratio(created, n_each),
        update_acc: ratio(updated, n_each),
        delete_acc: ratio(residual, n_each),
    })
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes `<dir>/<protocol>.csv` and `<dir>/<protocol>.txt`.
pub fn write_report<R: Report>(dir: impl AsRef<Path>, report: &R) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{}.csv", R::PROTOCOL));
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_error)?;
    w.serialize(report).map_err(csv_error)?;
    w.flush()?;
    let txt_path = dir.join(format!("{}.txt", R::PROTOCOL));
    fs::write(&txt_path, report.summary())?;
    Ok((csv_path, txt_path))
}

pub fn read_report<R: Report>(path: impl AsRef<Path>) -> Result<R> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize()
        .next()
        .ok_or_else(|| Error::Domain("report file has no data row".into()))?
        .map_err(csv_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hop_cases_chain() {
        let cases = hop_cases(3, 3, 1);
        let c = &cases[0];
        assert_eq!(c.facts.len(), 3);
        assert!(c.question.starts_with("What is the "));
        assert_eq!(c.question.matches(" of ").count(), 3);
        // each fact's value is the next fact's subject
        for w in c.facts.windows(2) {
            assert!(w[1].0.ends_with(&w[0].1));
        }
        assert_eq!(c.facts[2].1, c.answer);
        assert_eq!(hop_cases(3, 3, 1), cases);
    }

    #[test]
    fn oracle_plans_one_hop_at_a_time() {
        let o = Oracle::new(Planner::Decompose, Judge::Gold, HashMap::new());
        let q = "What is the rival of the mentor of Kavo?";
        let plan = o.plan(&[], q);
        assert_eq!(plan[0].text("query"), Some("the mentor of Kavo"));
        assert_eq!(plan[1].operator, Operator::Coordinator);
        let plan = o.plan(&["the mentor of Kavo: Zel".into()], q);
        assert_eq!(plan[0].text("query"), Some("the rival of Zel"));
        assert_eq!(plan[1].operator, Operator::Responder);
        assert_eq!(plan[1].text("query"), Some("What is the rival of Zel?"));
        let plan = o.plan(
            &["the mentor of Kavo: Zel".into(), "the rival of Zel: Ur".into()],
            q,
        );
        assert_eq!(plan.len(), 1);
        assert!(o.plan(&[format!("{REJECTED}: x")], q).is_empty());
    }

    #[test]
    fn oracle_responder_is_single_hop() {
        let o = Oracle::new(Planner::Direct, Judge::Gold, HashMap::new());
        let ctx = vec!["the mentor of Kavo: Zel".to_string()];
        assert_eq!(o.answer(&ctx, "What is the mentor of Kavo?"), "Zel");
        assert_eq!(o.answer(&ctx, "What is the rival of the mentor of Kavo?"), "None");
        assert_eq!(o.answer(&[], "What is the mentor of Kavo?"), "None");
    }

    #[test]
    fn empty_reasoning_report() {
        let r = bench_reasoning(0, 2, 3).unwrap();
        assert_eq!((r.accuracy_direct, r.accuracy_decomposed), (0.0, 0.0));
        assert!(bench_reasoning(1, 5, 3).is_err());
    }

    #[test]
    fn metabolism_zero_epochs_ties() {
        let r = bench_metabolism(10, 0, 7, 0.0).unwrap();
        assert_eq!(r.original_wins_ratio, 0.0);
        assert_eq!(r.mean_original_score, 0.5);
    }

    #[test]
    fn manipulation_needs_facts() {
        assert!(bench_manipulation(0, 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = MetabolismReport {
            pairs: 3,
            epochs: 2,
            seed: 9,
            noise: 0.1,
            original_wins_ratio: 2.0 / 3.0,
            mean_original_score: 0.1 + 0.2,
            mean_counterfactual_score: 0.0,
            original_selected_ratio: 1.0,
        };
        let (csv_path, txt) = write_report(dir.path(), &r).unwrap();
        assert_eq!(read_report::<MetabolismReport>(&csv_path).unwrap(), r);
        assert!(fs::read_to_string(txt).unwrap().contains("original wins"));
    }
}
