//! The inference engine.
//!
//! A query becomes one `Coordinator` command in a queue. The engine pops the
//! front command, runs its operator and, when the operator emits commands,
//! puts them at the front of the queue in emitted order, one level deeper
//! than their parent. So a sub-problem is finished before anything that was
//! queued behind it. Every executed command is one engine step, advances
//! short-term memory decay by one tick and leaves one trace record.
//!
//! A run ends when a discriminator accepts a response, when the queue runs
//! dry, when the step budget is spent, or when an expansion would go deeper
//! than `max_depth`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{Role, Router};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::metabolism::{feature, BanditConfig};
use crate::operators::{self, Outcome};
use crate::stm::{ShortTermMemory, StmConfig};
use crate::store::{KnowledgeId, Store};
use crate::web::{Fetcher, NoFetcher, NoWebSearch, SearchResult, WebSearch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Operator {
    Coordinator,
    Searcher,
    Browser,
    Responder,
    Discriminator,
}

impl Operator {
    pub const ALL: [Operator; 5] = [
        Operator::Coordinator,
        Operator::Searcher,
        Operator::Browser,
        Operator::Responder,
        Operator::Discriminator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Operator::Coordinator => "Coordinator",
            Operator::Searcher => "Searcher",
            Operator::Browser => "Browser",
            Operator::Responder => "Responder",
            Operator::Discriminator => "Discriminator",
        }
    }

    /// Canonical names plus the verb forms models tend to produce.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "Coordinator" | "Coordinate" => Operator::Coordinator,
            "Searcher" | "Search" => Operator::Searcher,
            "Browser" | "Browse" => Operator::Browser,
            "Responder" | "Respond" => Operator::Responder,
            "Discriminator" | "Discriminate" => Operator::Discriminator,
            _ => return None,
        })
    }

    /// `(name, required, is_list)` for every argument the operator accepts.
    fn schema(self) -> &'static [(&'static str, bool, bool)] {
        match self {
            Operator::Coordinator => &[("query", true, false), ("context", false, true)],
            Operator::Searcher => &[("query", true, false), ("filter", false, false)],
            Operator::Browser => &[("path", true, false), ("query", true, false)],
            Operator::Responder => &[("query", true, false), ("context", false, true)],
            Operator::Discriminator => &[
                ("query", true, false),
                ("response", true, false),
                ("context", false, true),
            ],
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArgValue {
    Text(String),
    List(Vec<String>),
}

/// One unit of engine work. Serializes to `{"operator": .., "args": {..}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub operator: Operator,
    pub args: BTreeMap<String, ArgValue>,
    #[serde(skip)]
    pub depth: usize,
}

impl Command {
    pub fn new(operator: Operator) -> Self {
        Self {
            operator,
            args: BTreeMap::new(),
            depth: 0,
        }
    }

    pub fn arg(mut self, key: &str, value: impl Into<String>) -> Self {
        self.args.insert(key.to_string(), ArgValue::Text(value.into()));
        self
    }

    pub fn list_arg(mut self, key: &str, values: Vec<String>) -> Self {
        self.args.insert(key.to_string(), ArgValue::List(values));
        self
    }

    pub fn text(&self, key: &str) -> Option<&str> {
        match self.args.get(key) {
            Some(ArgValue::Text(s)) => Some(s),
            _ => None,
        }
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        match self.args.get(key) {
            Some(ArgValue::List(v)) => v.clone(),
            Some(ArgValue::Text(s)) => vec![s.clone()],
            None => Vec::new(),
        }
    }

    /// Checks arguments against the operator's schema.
    pub fn validate(&self) -> Result<()> {
        let schema = self.operator.schema();
        for key in self.args.keys() {
            if !schema.iter().any(|(k, _, _)| k == key) {
                return Err(Error::Schema(format!(
                    "{} does not accept argument `{key}`",
                    self.operator
                )));
            }
        }
        for (key, required, is_list) in schema {
            match self.args.get(*key) {
                None if *required => {
                    return Err(Error::Schema(format!(
                        "{} requires argument `{key}`",
                        self.operator
                    )))
                }
                Some(ArgValue::Text(s)) if *required && s.trim().is_empty() => {
                    return Err(Error::Schema(format!(
                        "{} argument `{key}` is empty",
                        self.operator
                    )))
                }
                Some(ArgValue::List(_)) if !is_list => {
                    return Err(Error::Schema(format!(
                        "{} argument `{key}` must be a string",
                        self.operator
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("commands serialize")
    }
}

fn arg_value(v: Value) -> std::result::Result<ArgValue, String> {
    match v {
        Value::String(s) => Ok(ArgValue::Text(s)),
        Value::Array(items) => items
            .into_iter()
            .map(|i| match i {
                Value::String(s) => Ok(s),
                other => Ok(other.to_string()),
            })
            .collect::<std::result::Result<Vec<_>, String>>()
            .map(ArgValue::List),
        Value::Null => Err("null argument".into()),
        other => Ok(ArgValue::Text(other.to_string())),
    }
}

fn command_of(item: Value, index: usize) -> Result<Command> {
    let (name, args) = match item {
        Value::Object(mut obj) => (
            obj.remove("operator").unwrap_or(Value::Null),
            obj.remove("args").unwrap_or(Value::Object(Default::default())),
        ),
        // `["Searcher", {...}]` tuple form
        Value::Array(mut pair) if pair.len() == 2 => {
            let args = pair.pop().expect("len 2");
            (pair.pop().expect("len 2"), args)
        }
        _ => {
            return Err(Error::CommandParse(format!(
                "element {index} is not a command object"
            )))
        }
    };
    let name = match name {
        Value::String(s) => s,
        _ => {
            return Err(Error::CommandParse(format!(
                "element {index} has no operator name"
            )))
        }
    };
    let operator = Operator::from_name(&name)
        .ok_or_else(|| Error::Schema(format!("unknown operator `{name}`")))?;
    let args = match args {
        Value::Object(map) => map
            .into_iter()
            .map(|(k, v)| {
                arg_value(v)
                    .map(|v| (k.to_lowercase(), v))
                    .map_err(|e| Error::Schema(format!("{operator} argument `{k}`: {e}")))
            })
            .collect::<Result<BTreeMap<_, _>>>()?,
        _ => {
            return Err(Error::CommandParse(format!(
                "element {index} has non-object args"
            )))
        }
    };
    let cmd = Command {
        operator,
        args,
        depth: 0,
    };
    cmd.validate()?;
    Ok(cmd)
}

/// Parses a model reply holding a JSON array of commands.
///
/// Text around the outermost `[...]` (code fences, prose) is ignored.
pub fn parse_commands(llm_text: &str) -> Result<Vec<Command>> {
    let start = llm_text.find('[');
    let end = llm_text.rfind(']');
    let body = match (start, end) {
        (Some(s), Some(e)) if s < e => &llm_text[s..=e],
        _ => {
            return Err(Error::CommandParse(
                "reply does not contain a JSON array".into(),
            ))
        }
    };
    let items: Vec<Value> =
        serde_json::from_str(body).map_err(|e| Error::CommandParse(e.to_string()))?;
    items
        .into_iter()
        .enumerate()
        .map(|(i, v)| command_of(v, i))
        .collect()
}

/// Appended to a prompt whose reply failed to parse.
pub fn repair_prompt(prompt: &str, error: &Error) -> String {
    format!(
        "{prompt}\n\nYour previous reply could not be used ({error}). \
         Reply again with only a JSON array of commands."
    )
}

/// Knowledge credited by a discriminator verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Credit {
    pub id: KnowledgeId,
    pub weight: f64,
    /// The query whose embedding built the bandit feature.
    pub query: String,
    pub payoff: f64,
    pub score_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceOutcome {
    Emitted { commands: Vec<Command> },
    Results { results: Vec<SearchResult> },
    Answer { answer: String },
    Verdict { valid: bool, response: String, credited: Vec<Credit> },
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub depth: usize,
    pub command: Command,
    pub outcome: TraceOutcome,
    pub attempts: u32,
    pub stm_snapshot_size: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FailureReport {
    DepthExceeded {
        command: Command,
        depth: usize,
        max_depth: usize,
    },
    QueueExhausted,
    StepBudget { budget: usize },
}

impl fmt::Display for FailureReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReport::DepthExceeded {
                command,
                depth,
                max_depth,
            } => write!(
                f,
                "recursion depth {depth} exceeds the maximum of {max_depth} at command {}",
                command.to_json()
            ),
            FailureReport::QueueExhausted => {
                f.write_str("command queue exhausted without a validated answer")
            }
            FailureReport::StepBudget { budget } => {
                write!(f, "step budget of {budget} commands exhausted")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub trace_id: String,
    pub query: String,
    pub records: Vec<TraceRecord>,
    pub final_answer: Option<String>,
    pub failure: Option<FailureReport>,
}

impl Trace {
    /// Knowledge credited anywhere in the run, last credit per id wins.
    pub fn credits(&self) -> Vec<Credit> {
        let mut by_id: BTreeMap<KnowledgeId, Credit> = BTreeMap::new();
        for r in &self.records {
            if let TraceOutcome::Verdict { credited, .. } = &r.outcome {
                for c in credited {
                    by_id.insert(c.id, c.clone());
                }
            }
        }
        by_id.into_values().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreChange {
    pub id: KnowledgeId,
    pub payoff: f64,
    pub before: f64,
    pub after: f64,
}

/// Per-query mutable state.
#[derive(Debug, Clone)]
pub struct Session {
    pub stm: ShortTermMemory,
    /// Searcher results by the query that produced them, oldest first.
    pub search_results: Vec<(String, Vec<SearchResult>)>,
}

impl Session {
    pub fn new(stm: StmConfig) -> Self {
        Self {
            stm: ShortTermMemory::new(stm),
            search_results: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub max_depth: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub answer: std::result::Result<String, FailureReport>,
    pub trace: Trace,
}

pub struct Engine {
    pub(crate) store: Arc<Store>,
    pub(crate) router: Router,
    pub(crate) web: Arc<dyn WebSearch>,
    pub(crate) fetcher: Arc<dyn Fetcher>,
    pub(crate) config: Config,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("store", &self.store)
            .field("router", &self.router)
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(store: Arc<Store>, router: Router, config: Config) -> Self {
        Self {
            store,
            router,
            web: Arc::new(NoWebSearch),
            fetcher: Arc::new(NoFetcher),
            config,
        }
    }

    pub fn with_web_search(mut self, web: Arc<dyn WebSearch>) -> Self {
        self.web = web;
        self
    }

    pub fn with_fetcher(mut self, fetcher: Arc<dyn Fetcher>) -> Self {
        self.fetcher = fetcher;
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn bandit(&self) -> BanditConfig {
        BanditConfig {
            alpha: self.config.alpha,
            eta: self.config.eta,
        }
    }

    pub fn stm_config(&self) -> StmConfig {
        StmConfig {
            a0: self.config.a0,
            lambda: self.config.lambda_decay,
            tau: self.config.tau,
            capacity: self.config.stm_capacity,
            char_budget: self.config.char_budget,
        }
    }

    pub fn new_session(&self) -> Session {
        Session::new(self.stm_config())
    }

    /// Completion through the routed backend.
    pub(crate) fn complete(&self, role: Role, prompt: &str) -> Result<String> {
        self.router.complete(role, prompt)
    }

    pub fn run(&self, query: &str, opts: RunOptions) -> Result<RunResult> {
        self.run_with_events(query, opts, &mut |_, _| {})
    }

    /// Runs a query, reporting every trace record to `sink` as it happens.
    pub fn run_with_events(
        &self,
        query: &str,
        opts: RunOptions,
        sink: &mut dyn FnMut(&str, &TraceRecord),
    ) -> Result<RunResult> {
        if query.trim().is_empty() {
            return Err(Error::Domain("query must be nonempty".into()));
        }
        let max_depth = opts.max_depth.unwrap_or(self.config.max_depth);
        let mut session = self.new_session();
        let mut trace = Trace {
            trace_id: uuid::Uuid::new_v4().to_string(),
            query: query.to_string(),
            records: Vec::new(),
            final_answer: None,
            failure: None,
        };
        let mut queue: VecDeque<Command> =
            VecDeque::from([Command::new(Operator::Coordinator).arg("query", query)]);
        let mut step = 0;
        let failure = loop {
            let Some(cmd) = queue.pop_front() else {
                break Some(FailureReport::QueueExhausted);
            };
            if step == self.config.step_budget {
                break Some(FailureReport::StepBudget {
                    budget: self.config.step_budget,
                });
            }
            step += 1;
            let mut warnings = Vec::new();
            let mut attempts = 1;
            let mut result = operators::execute(self, &mut session, &cmd, &mut warnings);
            if let Err(e) = &result {
                warnings.push(format!("attempt 1 failed: {e}"));
                attempts = 2;
                result = operators::execute(self, &mut session, &cmd, &mut warnings);
            }
            session.stm.tick();
            let (outcome, children, answer) = match result {
                Ok(Outcome::Commands(c)) => (
                    TraceOutcome::Emitted {
                        commands: c.clone(),
                    },
                    c,
                    None,
                ),
                Ok(Outcome::Results(results)) => {
                    (TraceOutcome::Results { results }, Vec::new(), None)
                }
                Ok(Outcome::Answer(answer)) => (TraceOutcome::Answer { answer }, Vec::new(), None),
                Ok(Outcome::Verdict {
                    valid,
                    response,
                    credited,
                    next,
                }) => {
                    let answer = valid.then(|| response.clone());
                    (
                        TraceOutcome::Verdict {
                            valid,
                            response,
                            credited,
                        },
                        next,
                        answer,
                    )
                }
                Err(e) => (
                    TraceOutcome::Error {
                        message: e.to_string(),
                    },
                    Vec::new(),
                    None,
                ),
            };
            let mut children = children;
            if children.len() > self.config.fanout_cap {
                warnings.push(format!(
                    "expansion of {} commands truncated to {}",
                    children.len(),
                    self.config.fanout_cap
                ));
                children.truncate(self.config.fanout_cap);
            }
            let record = TraceRecord {
                step,
                depth: cmd.depth,
                command: cmd.clone(),
                outcome,
                attempts,
                stm_snapshot_size: session.stm.snapshot().len(),
                warnings,
            };
            sink(&trace.trace_id, &record);
            trace.records.push(record);
            if let Some(answer) = answer {
                trace.final_answer = Some(answer);
                break None;
            }
            if children.is_empty() {
                continue;
            }
            let depth = cmd.depth + 1;
            if depth > max_depth {
                break Some(FailureReport::DepthExceeded {
                    command: Command {
                        depth,
                        ..children.swap_remove(0)
                    },
                    depth,
                    max_depth,
                });
            }
            for mut child in children.into_iter().rev() {
                child.depth = depth;
                queue.push_front(child);
            }
        };
        trace.failure = failure.clone();
        let answer = match failure {
            Some(f) => Err(f),
            None => Ok(trace.final_answer.clone().expect("set on success")),
        };
        Ok(RunResult { answer, trace })
    }

    /// Applies an explicit payoff to every knowledge piece the trace credits.
    ///
    /// Each credited piece receives `payoff · weight` on the feature built from
    /// the credited query and the piece's current key. Pieces deleted since the
    /// run are skipped.
    pub fn feedback(&self, trace: &Trace, payoff: f64) -> Result<Vec<ScoreChange>> {
        if !(-1.0..=1.0).contains(&payoff) {
            return Err(Error::Domain(format!("payoff {payoff} outside [-1, 1]")));
        }
        let embedder = self.store.embedder();
        let mut changes = Vec::new();
        for credit in trace.credits() {
            let Ok(t) = self.store.get(credit.id) else {
                continue;
            };
            let x = feature(&embedder.embed(&credit.query)?, &t.key)?;
            let r = payoff * credit.weight;
            let before = t.cred.score();
            let after = self.store.apply_payoff(credit.id, &x, r, self.config.eta)?;
            changes.push(ScoreChange {
                id: credit.id,
                payoff: r,
                before,
                after,
            });
        }
        Ok(changes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_command() {
        let cmds = parse_commands(r#"[{"operator":"Responder","args":{"query":"q"}}]"#).unwrap();
        assert_eq!(cmds.len(), 1);
        assert_eq!(cmds[0].operator, Operator::Responder);
        assert_eq!(cmds[0].text("query"), Some("q"));
    }

    #[test]
    fn empty_array_is_empty_plan() {
        assert!(parse_commands("[]").unwrap().is_empty());
        assert!(parse_commands("```json\n[]\n```").unwrap().is_empty());
    }

    #[test]
    fn unknown_operator_is_named() {
        let err = parse_commands(r#"[{"operator":"Nope","args":{}}]"#).unwrap_err();
        assert!(matches!(&err, Error::Schema(m) if m.contains("Nope")), "{err}");
    }

    #[test]
    fn schema_violations() {
        for bad in [
            r#"[{"operator":"Searcher","args":{}}]"#,
            r#"[{"operator":"Browser","args":{"path":"x"}}]"#,
            r#"[{"operator":"Responder","args":{"query":"q","colour":"red"}}]"#,
            r#"[{"operator":"Searcher","args":{"query":["a"]}}]"#,
        ] {
            assert!(matches!(parse_commands(bad), Err(Error::Schema(_))), "{bad}");
        }
        assert!(matches!(parse_commands("no json here"), Err(Error::CommandParse(_))));
        assert!(matches!(parse_commands("[{"), Err(Error::CommandParse(_))));
    }

    #[test]
    fn accepts_verb_aliases_and_capitalized_keys() {
        let cmds = parse_commands(
            r#"[["Browse", {"Path": "<x>", "Query": "top 10"}], {"operator": "Coordinate", "args": {"Query": "q"}}]"#,
        )
        .unwrap();
        assert_eq!(cmds[0].operator, Operator::Browser);
        assert_eq!(cmds[0].text("path"), Some("<x>"));
        assert_eq!(cmds[1].operator, Operator::Coordinator);
    }

    #[test]
    fn wire_shape_is_operator_and_args() {
        let c = Command::new(Operator::Searcher).arg("query", "q");
        assert_eq!(c.to_json(), r#"{"operator":"Searcher","args":{"query":"q"}}"#);
        assert_eq!(parse_commands(&format!("[{}]", c.to_json())).unwrap(), vec![c]);
    }
}
