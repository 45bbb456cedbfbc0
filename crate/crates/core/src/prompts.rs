//! Prompt templates shipped under `prompts/<version>/`.
//!
//! Placeholders are `{Name}` tokens. Rendering is a single left-to-right pass,
//! so substituted text is never re-scanned and braces that do not name a
//! supplied placeholder (the JSON in the command listing) are kept verbatim.

use crate::engine::Operator;

pub const PROMPT_VERSION: &str = "v1";

const COORDINATOR: &str = include_str!("../prompts/v1/coordinator.txt");
const BROWSER: &str = include_str!("../prompts/v1/browser.txt");
const RESPONDER: &str = include_str!("../prompts/v1/responder.txt");
const DISCRIMINATOR: &str = include_str!("../prompts/v1/discriminator.txt");
const SUMMARIZER: &str = include_str!("../prompts/v1/summarizer.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template(&'static str);

impl Template {
    /// Template for an operator's language-model call; the searcher has none.
    pub fn for_operator(op: Operator) -> Option<Self> {
        match op {
            Operator::Coordinator => Some(Self(COORDINATOR)),
            Operator::Browser => Some(Self(BROWSER)),
            Operator::Responder => Some(Self(RESPONDER)),
            Operator::Discriminator => Some(Self(DISCRIMINATOR)),
            Operator::Searcher => None,
        }
    }

    pub fn summarizer() -> Self {
        Self(SUMMARIZER)
    }

    pub fn text(&self) -> &'static str {
        self.0.trim_end_matches('\n')
    }

    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let src = self.text();
        let mut out = String::with_capacity(src.len() + 64);
        let mut rest = src;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let tail = &rest[open..];
            let hit = tail.find('}').and_then(|close| {
                let name = &tail[1..close];
                vars.iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| (close, *v))
            });
            match hit {
                Some((close, value)) => {
                    out.push_str(value);
                    rest = &tail[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = &tail[1..];
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// Renders a knowledge list as a JSON array of strings.
pub fn render_context(items: &[String]) -> String {
    serde_json::to_string(items).expect("strings serialize")
}
