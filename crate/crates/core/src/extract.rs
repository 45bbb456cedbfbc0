//! Text extraction for the browser operator.
//!
//! HTML goes through a block-level boilerplate filter: `script`, `style`,
//! navigation and page chrome subtrees are dropped, the remaining text is
//! split into blocks at block-level elements, and only blocks of at least
//! [`MIN_BLOCK_WORDS`] words are kept. Pages without any such block fall back
//! to all remaining text.

use ego_tree::NodeRef;
use scraper::{Html, Node};

use crate::error::{Error, Result};

pub const MIN_BLOCK_WORDS: usize = 25;

const DROPPED: &[&str] = &[
    "script", "style", "nav", "header", "footer", "aside", "noscript", "form", "iframe",
    "template", "svg", "button", "select", "head",
];

const BLOCKS: &[&str] = &[
    "p", "div", "li", "ul", "ol", "td", "th", "tr", "table", "h1", "h2", "h3", "h4", "h5", "h6",
    "article", "section", "main", "body", "pre", "blockquote", "dd", "dt", "dl", "br", "hr",
    "figcaption", "caption",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContentKind {
    Html,
    Pdf,
    Text,
}

impl ContentKind {
    /// Classifies a MIME type (parameters ignored).
    pub fn from_mime(mime: &str) -> Result<Self> {
        let base = mime.split(';').next().unwrap_or("").trim().to_ascii_lowercase();
        match base.as_str() {
            "text/html" | "application/xhtml+xml" => Ok(Self::Html),
            "application/pdf" => Ok(Self::Pdf),
            "text/plain" | "text/markdown" | "application/json" | "text/csv" => Ok(Self::Text),
            _ => Err(Error::UnsupportedContent(base)),
        }
    }

    pub fn from_extension(path: &str) -> Result<Self> {
        let ext = path
            .rsplit_once('.')
            .map(|(_, e)| e.to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "html" | "htm" | "xhtml" => Ok(Self::Html),
            "pdf" => Ok(Self::Pdf),
            "txt" | "md" | "json" | "csv" => Ok(Self::Text),
            _ => Err(Error::UnsupportedContent(format!(".{ext}"))),
        }
    }
}

pub fn extract(kind: ContentKind, bytes: &[u8]) -> Result<String> {
    match kind {
        ContentKind::Html => Ok(html_main_text(&String::from_utf8_lossy(bytes))),
        ContentKind::Text => Ok(String::from_utf8_lossy(bytes).into_owned()),
        // the parser panics on some malformed inputs
        ContentKind::Pdf => std::panic::catch_unwind(|| pdf_extract::extract_text_from_mem(bytes))
            .map_err(|_| Error::UnsupportedContent("unreadable pdf".into()))?
            .map_err(|e| Error::UnsupportedContent(format!("unreadable pdf: {e}"))),
    }
}

fn walk(node: NodeRef<'_, Node>, blocks: &mut Vec<String>, cur: &mut String) {
    match node.value() {
        Node::Text(t) => cur.push_str(t),
        Node::Element(e) => {
            let name = e.name();
            if DROPPED.contains(&name) {
                return;
            }
            let block = BLOCKS.contains(&name);
            if block {
                flush(blocks, cur);
            }
            for child in node.children() {
                walk(child, blocks, cur);
            }
            if block {
                flush(blocks, cur);
            }
        }
        _ => {
            for child in node.children() {
                walk(child, blocks, cur);
            }
        }
    }
}

fn flush(blocks: &mut Vec<String>, cur: &mut String) {
    let text = cur.split_whitespace().collect::<Vec<_>>().join(" ");
    if !text.is_empty() {
        blocks.push(text);
    }
    cur.clear();
}

/// Main text of an HTML page, one retained block per line.
pub fn html_main_text(html: &str) -> String {
    let doc = Html::parse_document(html);
    let mut blocks = Vec::new();
    let mut cur = String::new();
    walk(doc.tree.root(), &mut blocks, &mut cur);
    flush(&mut blocks, &mut cur);
    let long: Vec<&String> = blocks
        .iter()
        .filter(|b| b.split_whitespace().count() >= MIN_BLOCK_WORDS)
        .collect();
    if long.is_empty() {
        blocks.join("\n")
    } else {
        long.into_iter().cloned().collect::<Vec<_>>().join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(n: usize, w: &str) -> String {
        vec![w; n].join(" ")
    }

    #[test]
    fn drops_chrome_and_short_blocks() {
        let body = words(30, "race");
        let html = format!(
            "<html><head><title>T</title><style>p{{}}</style></head><body>\
             <nav>{}</nav><h1>Heading</h1><p>{body}</p><p>short line</p>\
             <script>var x = 1;</script><footer>{}</footer></body></html>",
            words(40, "menu"),
            words(40, "copyright")
        );
        let text = html_main_text(&html);
        assert_eq!(text, body);
    }

    #[test]
    fn falls_back_when_nothing_is_long() {
        let text = html_main_text("<p>Paris is the capital</p><p>of France</p>");
        assert_eq!(text, "Paris is the capital\nof France");
    }

    #[test]
    fn content_kinds() {
        assert_eq!(ContentKind::from_mime("text/html; charset=utf-8").unwrap(), ContentKind::Html);
        assert_eq!(ContentKind::from_extension("a/b.PDF").unwrap(), ContentKind::Pdf);
        match ContentKind::from_mime("image/png") {
            Err(Error::UnsupportedContent(t)) => assert_eq!(t, "image/png"),
            other => panic!("{other:?}"),
        }
        assert!(ContentKind::from_extension("x.docx").is_err());
    }

    #[test]
    fn garbage_pdf_is_an_error() {
        assert!(extract(ContentKind::Pdf, b"not a pdf").is_err());
    }
}
