//! Keyword filter expressions over knowledge triples.
//!
//! ```text
//! expr    := clause (("AND" | "OR") clause)*
//! clause  := field op literal
//! field   := "context" | "value" | "score"
//! op      := "CONTAINS" | "=" | ">" | ">=" | "<" | "<="
//! literal := double-quoted string | decimal
//! ```
//!
//! `AND` binds tighter than `OR`. `CONTAINS` is a case-insensitive substring
//! test. Text fields accept `CONTAINS` and `=` with a string literal; `score`
//! accepts the comparison operators with a decimal.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextField {
    Context,
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Eq,
    Gt,
    Ge,
    Lt,
    Le,
}

impl Cmp {
    fn symbol(self) -> &'static str {
        match self {
            Cmp::Eq => "=",
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
            Cmp::Lt => "<",
            Cmp::Le => "<=",
        }
    }

    fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Cmp::Eq => lhs == rhs,
            Cmp::Gt => lhs > rhs,
            Cmp::Ge => lhs >= rhs,
            Cmp::Lt => lhs < rhs,
            Cmp::Le => lhs <= rhs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Clause {
    Contains(TextField, String),
    TextEq(TextField, String),
    Score(Cmp, f64),
}

/// Disjunction of conjunctions.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterExpr {
    any_of: Vec<Vec<Clause>>,
}

/// The fields a filter can inspect.
pub trait Filterable {
    fn context(&self) -> &str;
    fn value(&self) -> &str;
    fn score(&self) -> f64;
}

impl Clause {
    fn matches<T: Filterable + ?Sized>(&self, t: &T) -> bool {
        let text = |f: &TextField| match f {
            TextField::Context => t.context(),
            TextField::Value => t.value(),
        };
        match self {
            Clause::Contains(f, needle) => text(f).to_lowercase().contains(&needle.to_lowercase()),
            Clause::TextEq(f, s) => text(f) == s,
            Clause::Score(cmp, x) => cmp.holds(t.score(), *x),
        }
    }
}

impl FilterExpr {
    pub fn parse(input: &str) -> Result<Self> {
        Parser::new(input)?.expr()
    }

    pub fn matches<T: Filterable + ?Sized>(&self, t: &T) -> bool {
        self.any_of
            .iter()
            .any(|conj| conj.iter().all(|c| c.matches(t)))
    }
}

impl FromStr for FilterExpr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = |t: &TextField| match t {
            TextField::Context => "context",
            TextField::Value => "value",
        };
        match self {
            Clause::Contains(t, s) => write!(f, "{} CONTAINS {}", name(t), quote(s)),
            Clause::TextEq(t, s) => write!(f, "{} = {}", name(t), quote(s)),
            Clause::Score(c, x) => write!(f, "score {} {:?}", c.symbol(), x),
        }
    }
}

impl fmt::Display for FilterExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, conj) in self.any_of.iter().enumerate() {
            if i > 0 {
                f.write_str(" OR ")?;
            }
            for (j, c) in conj.iter().enumerate() {
                if j > 0 {
                    f.write_str(" AND ")?;
                }
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Op(Cmp),
    Str(String),
    Num(f64),
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

fn err(position: usize, message: impl Into<String>) -> Error {
    Error::Filter {
        position,
        message: message.into(),
    }
}

fn lex(input: &str) -> Result<Vec<(usize, Tok)>> {
    let mut toks = Vec::new();
    let mut it = input.char_indices().peekable();
    while let Some(&(start, c)) = it.peek() {
        match c {
            c if c.is_whitespace() => {
                it.next();
            }
            '"' => {
                it.next();
                let mut s = String::new();
                let mut closed = false;
                while let Some((_, c)) = it.next() {
                    match c {
                        '"' => {
                            closed = true;
                            break;
                        }
                        '\\' => match it.next() {
                            Some((_, e)) => s.push(e),
                            None => break,
                        },
                        c => s.push(c),
                    }
                }
                if !closed {
                    return Err(err(start, "unterminated string literal"));
                }
                toks.push((start, Tok::Str(s)));
            }
            '=' | '<' | '>' => {
                it.next();
                let eq = matches!(it.peek(), Some((_, '=')));
                let op = match (c, eq) {
                    ('=', _) => Cmp::Eq,
                    ('<', true) => Cmp::Le,
                    ('<', false) => Cmp::Lt,
                    ('>', true) => Cmp::Ge,
                    _ => Cmp::Gt,
                };
                if eq && c != '=' {
                    it.next();
                }
                toks.push((start, Tok::Op(op)));
            }
            c if c.is_ascii_digit() || c == '-' || c == '.' => {
                let mut s = String::new();
                while let Some(&(_, d)) = it.peek() {
                    if d.is_ascii_digit() || d == '.' || (d == '-' && s.is_empty()) {
                        s.push(d);
                        it.next();
                    } else {
                        break;
                    }
                }
                let valid = {
                    let body = s.strip_prefix('-').unwrap_or(&s);
                    let mut parts = body.split('.');
                    let int = parts.next().unwrap_or("");
                    let frac = parts.next();
                    parts.next().is_none()
                        && !int.is_empty()
                        && int.bytes().all(|b| b.is_ascii_digit())
                        && frac.map_or(true, |f| !f.is_empty())
                };
                let n = s
                    .parse::<f64>()
                    .ok()
                    .filter(|_| valid)
                    .ok_or_else(|| err(start, format!("malformed decimal `{s}`")))?;
                toks.push((start, Tok::Num(n)));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::new();
                while let Some(&(_, d)) = it.peek() {
                    if d.is_ascii_alphanumeric() || d == '_' {
                        s.push(d);
                        it.next();
                    } else {
                        break;
                    }
                }
                toks.push((start, Tok::Word(s)));
            }
            other => return Err(err(start, format!("unexpected character `{other}`"))),
        }
    }
    Ok(toks)
}

impl Parser {
    fn new(input: &str) -> Result<Self> {
        Ok(Self {
            toks: lex(input)?,
            pos: 0,
            end: input.len(),
        })
    }

    fn next(&mut self) -> Option<(usize, Tok)> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<FilterExpr> {
        let mut any_of = vec![vec![self.clause()?]];
        while let Some((at, tok)) = self.next() {
            match tok {
                Tok::Word(w) if w == "AND" => any_of.last_mut().unwrap().push(self.clause()?),
                Tok::Word(w) if w == "OR" => any_of.push(vec![self.clause()?]),
                _ => return Err(err(at, "expected AND or OR")),
            }
        }
        Ok(FilterExpr { any_of })
    }

    fn clause(&mut self) -> Result<Clause> {
        let end = self.end;
        let (at, field) = self.next().ok_or_else(|| err(end, "expected field"))?;
        let field = match field {
            Tok::Word(w) => w,
            _ => return Err(err(at, "expected field")),
        };
        let (op_at, op) = self.next().ok_or_else(|| err(end, "expected operator"))?;
        let (lit_at, lit) = self.next().ok_or_else(|| err(end, "expected literal"))?;
        let text_field = match field.as_str() {
            "context" => Some(TextField::Context),
            "value" => Some(TextField::Value),
            "score" => None,
            other => return Err(err(at, format!("unknown field `{other}`"))),
        };
        match (text_field, op, lit) {
            (Some(f), Tok::Word(w), Tok::Str(s)) if w == "CONTAINS" => Ok(Clause::Contains(f, s)),
            (Some(f), Tok::Op(Cmp::Eq), Tok::Str(s)) => Ok(Clause::TextEq(f, s)),
            (Some(_), Tok::Word(w), _) if w == "CONTAINS" => {
                Err(err(lit_at, "CONTAINS requires a string literal"))
            }
            (Some(_), Tok::Op(Cmp::Eq), _) => Err(err(lit_at, "expected string literal")),
            (Some(_), _, _) => Err(err(op_at, "text fields support CONTAINS and =")),
            (None, Tok::Op(c), Tok::Num(x)) => Ok(Clause::Score(c, x)),
            (None, Tok::Op(_), _) => Err(err(lit_at, "score compares against a decimal")),
            (None, _, _) => Err(err(op_at, "expected comparison operator")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Rec(&'static str, &'static str, f64);

    impl Filterable for Rec {
        fn context(&self) -> &str {
            self.0
        }
        fn value(&self) -> &str {
            self.1
        }
        fn score(&self) -> f64 {
            self.2
        }
    }

    #[test]
    fn contains_is_case_insensitive() {
        let f = FilterExpr::parse(r#"value CONTAINS "paris""#).unwrap();
        assert!(f.matches(&Rec("capital of France", "Paris", 0.5)));
        assert!(!f.matches(&Rec("capital of Italy", "Rome", 0.5)));
    }

    #[test]
    fn and_binds_tighter_than_or() {
        let f = FilterExpr::parse(r#"score > 0.9 AND context CONTAINS "x" OR value = "v""#).unwrap();
        assert!(f.matches(&Rec("a", "v", 0.1)));
        assert!(!f.matches(&Rec("x", "w", 0.5)));
        assert!(f.matches(&Rec("x", "w", 0.95)));
    }

    #[test]
    fn score_comparisons() {
        let r = Rec("c", "v", 0.5);
        for (src, want) in [
            ("score >= 0.0", true),
            ("score > 0.5", false),
            ("score >= 0.5", true),
            ("score < 0.5", false),
            ("score <= 0.5", true),
            ("score = 0.5", true),
        ] {
            assert_eq!(FilterExpr::parse(src).unwrap().matches(&r), want, "{src}");
        }
    }

    #[test]
    fn errors_carry_positions() {
        let cases = [
            ("colour CONTAINS \"x\"", 0),
            ("value > \"x\"", 6),
            ("score CONTAINS 1", 6),
            ("value CONTAINS 3", 15),
            ("value CONTAINS \"x", 15),
            ("score > 1 XOR score < 2", 10),
            ("score >", 7),
            ("value = \"a\" AND", 15),
            ("score > 1.2.3", 8),
            ("score > 0 ; drop", 10),
        ];
        for (src, at) in cases {
            match FilterExpr::parse(src) {
                Err(Error::Filter { position, .. }) => assert_eq!(position, at, "{src}"),
                other => panic!("{src}: {other:?}"),
            }
        }
    }

    #[test]
    fn escaped_quotes() {
        let f = FilterExpr::parse(r#"value = "say \"hi\"""#).unwrap();
        assert!(f.matches(&Rec("c", "say \"hi\"", 0.0)));
    }

    fn arb_clause() -> impl Strategy<Value = Clause> {
        let field = prop_oneof![Just(TextField::Context), Just(TextField::Value)];
        let cmp = prop_oneof![
            Just(Cmp::Eq),
            Just(Cmp::Gt),
            Just(Cmp::Ge),
            Just(Cmp::Lt),
            Just(Cmp::Le)
        ];
        prop_oneof![
            (field.clone(), ".{0,12}").prop_map(|(f, s)| Clause::Contains(f, s)),
            (field, ".{0,12}").prop_map(|(f, s)| Clause::TextEq(f, s)),
            (cmp, 0u32..1000).prop_map(|(c, x)| Clause::Score(c, x as f64 / 1000.0)),
        ]
    }

    proptest! {
        #[test]
        fn display_parses_back(any_of in proptest::collection::vec(
            proptest::collection::vec(arb_clause(), 1..4), 1..4)) {
            let e = FilterExpr { any_of };
            prop_assert_eq!(FilterExpr::parse(&e.to_string()).unwrap(), e);
        }
    }
}
