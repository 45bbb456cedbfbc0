//! The five operators.
//!
//! | operator | input | output |
//! |----------|-------|--------|
//! | Coordinator | context, query | commands |
//! | Searcher | query | search results |
//! | Browser | path, query | answer or `"None"` |
//! | Responder | context, query | one Discriminator command |
//! | Discriminator | context, query, response | validity |
//!
//! Operators read and write the session's short-term memory and the shared
//! store. Only the discriminator can end a run with an answer.

use std::path::Path;

use serde_json::Value;

use crate::backend::Role;
use crate::embedding::cosine;
use crate::engine::{parse_commands, repair_prompt, Command, Credit, Engine, Operator, Session};
use crate::error::{Error, Result};
use crate::extract::{self, ContentKind};
use crate::filter::FilterExpr;
use crate::metabolism::{self, feature};
use crate::prompts::{render_context, Template};
use crate::retrieval::hybrid_search;
use crate::stm::StmSource;
use crate::store::KnowledgeId;
use crate::web::SearchResult;

/// Literal string a browser answer uses for "not found".
pub const NONE_SENTINEL: &str = "None";

pub const MEMORY_SCHEME: &str = "memory://";

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Commands(Vec<Command>),
    Results(Vec<SearchResult>),
    /// Browser answer; the sentinel is passed through as `"None"`.
    Answer(String),
    Verdict {
        valid: bool,
        response: String,
        credited: Vec<Credit>,
        next: Vec<Command>,
    },
}

pub(crate) fn execute(
    engine: &Engine,
    session: &mut Session,
    cmd: &Command,
    warnings: &mut Vec<String>,
) -> Result<Outcome> {
    cmd.validate()?;
    let query = cmd.text("query").unwrap_or_default();
    match cmd.operator {
        Operator::Coordinator => {
            let mut context = cmd.list("context");
            context.extend(session.stm.snapshot());
            coordinator(engine, &context, query).map(Outcome::Commands)
        }
        Operator::Searcher => {
            let filter = cmd.text("filter").map(FilterExpr::parse).transpose()?;
            searcher(engine, session, query, filter.as_ref(), warnings).map(Outcome::Results)
        }
        Operator::Browser => {
            let path = cmd.text("path").unwrap_or_default();
            browser(engine, session, path, query).map(Outcome::Answer)
        }
        Operator::Responder => {
            let mut context = cmd.list("context");
            context.extend(session.stm.snapshot());
            responder(engine, &context, query).map(|c| Outcome::Commands(vec![c]))
        }
        Operator::Discriminator => {
            let response = cmd.text("response").unwrap_or_default();
            discriminator(engine, session, &cmd.list("context"), query, response, warnings)
        }
    }
}

/// Plans the next commands for `query`, with one repair round on bad output.
pub fn coordinator(engine: &Engine, context: &[String], query: &str) -> Result<Vec<Command>> {
    if query.trim().is_empty() {
        return Err(Error::Domain("coordinator query must be nonempty".into()));
    }
    let prompt = Template::for_operator(Operator::Coordinator)
        .expect("coordinator template")
        .render(&[("Context", &render_context(context)), ("Query", query)]);
    let reply = engine.complete(Role::Coordinate, &prompt)?;
    match parse_commands(&reply) {
        Ok(cmds) => Ok(cmds),
        Err(first) => {
            let reply = engine.complete(Role::Coordinate, &repair_prompt(&prompt, &first))?;
            parse_commands(&reply)
        }
    }
}

fn memory_url(id: KnowledgeId) -> String {
    format!("{MEMORY_SCHEME}{id}")
}

/// Hybrid memory search merged with external search results.
///
/// Memory hits are ranked by similarity with the bandit's pick for the query
/// moved to the front, and every hit enters short-term memory.
pub fn searcher(
    engine: &Engine,
    session: &mut Session,
    query: &str,
    filter: Option<&FilterExpr>,
    warnings: &mut Vec<String>,
) -> Result<Vec<SearchResult>> {
    let cfg = engine.config();
    let store = engine.store();
    let hits = hybrid_search(store, query, filter, cfg.top_k, cfg.min_score)?;
    let mut triples = Vec::with_capacity(hits.len());
    for h in &hits {
        // a concurrent delete may race the search
        if let Ok(t) = store.get(h.id) {
            triples.push(t);
        }
    }
    if !triples.is_empty() {
        let q = store.embedder().embed(query)?;
        let candidates = triples
            .iter()
            .map(|t| Ok((t.id, &t.cred, feature(&q, &t.key)?)))
            .collect::<Result<Vec<_>>>()?;
        let chosen = metabolism::select(&candidates, cfg.alpha)?;
        if let Some(pos) = triples.iter().position(|t| t.id == chosen) {
            let t = triples.remove(pos);
            triples.insert(0, t);
        }
    }
    let mut results = Vec::new();
    for t in triples.iter().rev() {
        session.stm.add(
            StmSource::Knowledge(t.id),
            format!("{}: {}", t.context, t.value),
        );
    }
    results.extend(triples.iter().map(|t| SearchResult {
        desc: t.value.clone(),
        url: memory_url(t.id),
    }));
    match engine.web.search(query) {
        Ok(web) => {
            for r in web.iter().take(cfg.top_k).rev() {
                session
                    .stm
                    .add(StmSource::Literal(r.desc.clone()), r.desc.clone());
            }
            results.extend(web);
        }
        Err(e) => warnings.push(format!("external search failed, using memory only: {e}")),
    }
    session
        .search_results
        .push((query.to_string(), results.clone()));
    Ok(results)
}

/// Resolves `<search query>` references to the first external URL that
/// search found, or its first memory hit when there is none.
fn resolve_path(session: &Session, path: &str) -> Result<String> {
    let Some(inner) = path.strip_prefix('<').and_then(|p| p.strip_suffix('>')) else {
        return Ok(path.to_string());
    };
    let inner = inner.trim();
    let by_query = session
        .search_results
        .iter()
        .rev()
        .find(|(q, _)| q.eq_ignore_ascii_case(inner))
        .or_else(|| session.search_results.last());
    by_query
        .and_then(|(_, rs)| {
            rs.iter()
                .find(|r| !r.url.starts_with(MEMORY_SCHEME))
                .or_else(|| rs.first())
        })
        .map(|r| r.url.clone())
        .ok_or_else(|| Error::Fetch {
            path: path.to_string(),
            message: "reference does not match any search results".into(),
        })
}

fn load_text(engine: &Engine, path: &str) -> Result<String> {
    if let Some(id) = path.strip_prefix(MEMORY_SCHEME) {
        let id: KnowledgeId = id.trim_end_matches('/').parse().map_err(|_| Error::Fetch {
            path: path.to_string(),
            message: "malformed memory id".into(),
        })?;
        return Ok(engine.store().get(id)?.value);
    }
    if path.starts_with("http://") || path.starts_with("https://") {
        let doc = engine.fetcher.fetch(path)?;
        return extract::extract(ContentKind::from_mime(&doc.content_type)?, &doc.body);
    }
    let local = path.strip_prefix("file://").unwrap_or(path);
    if !Path::new(local).is_file() {
        return Err(Error::Fetch {
            path: path.to_string(),
            message: "not a URL, memory id or readable file".into(),
        });
    }
    let kind = ContentKind::from_extension(local)?;
    extract::extract(kind, &std::fs::read(local)?)
}

fn chunks(text: &str, size: usize) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    chars.chunks(size).map(|c| c.iter().collect()).collect()
}

/// Summarizes oversized text chunk by chunk until it fits `doc_budget`.
pub fn condense(engine: &Engine, text: String, query: &str) -> Result<String> {
    let cfg = engine.config();
    let budget = cfg.summary_chunk.to_string();
    let template = Template::summarizer();
    let mut text = text;
    let mut rounds = 0;
    while text.chars().count() > cfg.doc_budget {
        if rounds == 4 {
            // summaries are not shrinking; hard-truncate
            return Ok(text.chars().take(cfg.doc_budget).collect());
        }
        let mut parts = Vec::new();
        for chunk in chunks(&text, cfg.doc_budget) {
            let prompt = template.render(&[
                ("Budget", &budget),
                ("Query", query),
                ("Context", &chunk),
            ]);
            parts.push(engine.complete(Role::Summarize, &prompt)?.trim().to_string());
        }
        text = parts.join("\n");
        rounds += 1;
    }
    Ok(text)
}

/// Reads a document and answers `query` from it.
pub fn browser(engine: &Engine, session: &mut Session, path: &str, query: &str) -> Result<String> {
    let resolved = resolve_path(session, path)?;
    let text = load_text(engine, &resolved)?;
    let text = condense(engine, text, query)?;
    let prompt = Template::for_operator(Operator::Browser)
        .expect("browser template")
        .render(&[("Context", &text), ("Query", query)]);
    let answer = engine.complete(Role::Respond, &prompt)?.trim().to_string();
    if answer != NONE_SENTINEL {
        session
            .stm
            .add(StmSource::Literal(answer.clone()), answer.clone());
    }
    Ok(answer)
}

fn response_text(reply: &str) -> String {
    let trimmed = reply.trim();
    if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(trimmed) {
        for key in ["Response", "response"] {
            if let Some(Value::String(s)) = obj.get(key) {
                return s.trim().to_string();
            }
        }
    }
    trimmed.to_string()
}

/// Drafts a response and hands it to the discriminator.
pub fn responder(engine: &Engine, context: &[String], query: &str) -> Result<Command> {
    let prompt = Template::for_operator(Operator::Responder)
        .expect("responder template")
        .render(&[("Context", &render_context(context)), ("Query", query)]);
    let response = response_text(&engine.complete(Role::Respond, &prompt)?);
    if response.is_empty() {
        return Err(Error::Domain("responder produced an empty response".into()));
    }
    Ok(Command::new(Operator::Discriminator)
        .list_arg("context", context.to_vec())
        .arg("query", query)
        .arg("response", response))
}

/// Reads a True/False verdict.
pub fn parse_verdict(reply: &str) -> Option<bool> {
    let t = reply.trim().trim_end_matches('.').trim();
    if let Ok(v) = serde_json::from_str::<Value>(t) {
        match v {
            Value::Bool(b) => return Some(b),
            Value::Object(obj) => {
                for key in ["Validity", "validity", "valid"] {
                    if let Some(Value::Bool(b)) = obj.get(key) {
                        return Some(*b);
                    }
                }
            }
            _ => {}
        }
    }
    match t.to_ascii_lowercase().as_str() {
        "true" | "yes" | "valid" => Some(true),
        "false" | "no" | "invalid" => Some(false),
        _ => None,
    }
}

/// Contribution weights of the LTM-sourced short-term entries to `response`:
/// positive cosine similarity, normalized to sum to one. Entries with zero
/// weight are left out.
pub fn contributions(
    engine: &Engine,
    session: &Session,
    response: &str,
) -> Result<Vec<(KnowledgeId, f64)>> {
    let embedder = engine.store().embedder();
    let r = embedder.embed(response)?;
    let mut raw = Vec::new();
    for e in session.stm.entries() {
        if let StmSource::Knowledge(id) = e.source {
            let w = cosine(&embedder.embed(&e.content)?, &r)?.max(0.0);
            if w > 0.0 {
                raw.push((id, w));
            }
        }
    }
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    Ok(raw.into_iter().map(|(id, w)| (id, w / total)).collect())
}

/// Judges a response and moves credibility of the knowledge behind it.
pub fn discriminator(
    engine: &Engine,
    session: &mut Session,
    context: &[String],
    query: &str,
    response: &str,
    warnings: &mut Vec<String>,
) -> Result<Outcome> {
    if response.trim().is_empty() {
        return Err(Error::Domain("discriminator needs a nonempty response".into()));
    }
    let prompt = Template::for_operator(Operator::Discriminator)
        .expect("discriminator template")
        .render(&[
            ("Context", &render_context(context)),
            ("Response", response),
            ("Query", query),
        ]);
    let reply = engine.complete(Role::Discriminate, &prompt)?;
    let valid = match parse_verdict(&reply) {
        Some(v) => v,
        None => {
            let retry = format!("{prompt}\n\nAnswer with exactly True or False.");
            match parse_verdict(&engine.complete(Role::Discriminate, &retry)?) {
                Some(v) => v,
                None => {
                    warnings.push(format!("unparseable verdict {reply:?}; treating as invalid"));
                    false
                }
            }
        }
    };
    let sign = if valid { 1.0 } else { -1.0 };
    let store = engine.store();
    let q = store.embedder().embed(query)?;
    let mut credited = Vec::new();
    for (id, weight) in contributions(engine, session, response)? {
        let Ok(t) = store.get(id) else {
            continue;
        };
        let x = feature(&q, &t.key)?;
        let score_after = store.apply_payoff(id, &x, sign * weight, engine.config().eta)?;
        credited.push(Credit {
            id,
            weight,
            query: query.to_string(),
            payoff: sign * weight,
            score_after,
        });
    }
    let next = if valid {
        Vec::new()
    } else {
        let note = format!("Rejected response: {response}");
        session.stm.add(StmSource::Literal(note.clone()), note);
        vec![Command::new(Operator::Coordinator).arg("query", query)]
    };
    Ok(Outcome::Verdict {
        valid,
        response: response.to_string(),
        credited,
        next,
    })
}
