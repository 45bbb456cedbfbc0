//! Exact top-K retrieval over long-term memory with credibility gating.
//!
//! Selection keeps a bounded min-heap of the best `k` candidates seen so far,
//! so a scan costs `O(n log k)` rather than sorting the whole corpus. Ranking
//! is by cosine similarity descending, ties to the smaller id, and triples
//! whose credibility score is below `min_score` are never candidates.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, Vector};
use crate::error::{Error, Result};
use crate::filter::FilterExpr;
use crate::store::{KnowledgeId, KnowledgeTriple, Store};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_MIN_SCORE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: KnowledgeId,
    pub similarity: f64,
}

impl Eq for Hit {}

impl Ord for Hit {
    /// `Greater` means ranked earlier.
    fn cmp(&self, other: &Self) -> Ordering {
        self.similarity
            .total_cmp(&other.similarity)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Hit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn check(k: usize, min_score: f64) -> Result<()> {
    if k == 0 {
        return Err(Error::Domain("k must be positive".into()));
    }
    if !(0.0..=1.0).contains(&min_score) {
        return Err(Error::Domain(format!("min_score {min_score} outside [0, 1]")));
    }
    Ok(())
}

fn top_k<'a>(
    query: &Vector,
    candidates: impl Iterator<Item = &'a KnowledgeTriple>,
    k: usize,
    min_score: f64,
) -> Result<Vec<Hit>> {
    let mut heap: BinaryHeap<std::cmp::Reverse<Hit>> = BinaryHeap::with_capacity(k + 1);
    for t in candidates.filter(|t| t.cred.score() >= min_score) {
        let hit = Hit {
            id: t.id,
            similarity: cosine(query, &t.key)?,
        };
        if heap.len() < k {
            heap.push(std::cmp::Reverse(hit));
        } else if let Some(worst) = heap.peek() {
            if hit > worst.0 {
                heap.pop();
                heap.push(std::cmp::Reverse(hit));
            }
        }
    }
    let mut hits: Vec<Hit> = heap.into_iter().map(|r| r.0).collect();
    hits.sort_by(|a, b| b.cmp(a));
    Ok(hits)
}

pub fn vector_search(store: &Store, query: &Vector, k: usize, min_score: f64) -> Result<Vec<Hit>> {
    check(k, min_score)?;
    store.with_records(|records| top_k(query, records, k, min_score))
}

/// Keyword filter first, then vector ranking of the survivors.
pub fn hybrid_search(
    store: &Store,
    query_text: &str,
    filter: Option<&FilterExpr>,
    k: usize,
    min_score: f64,
) -> Result<Vec<Hit>> {
    check(k, min_score)?;
    let query = store.embedder().embed(query_text)?;
    store.with_records(|records| match filter {
        Some(f) => top_k(&query, records.filter(|t| f.matches(*t)), k, min_score),
        None => top_k(&query, records, k, min_score),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use crate::metabolism::feature;
    use std::sync::Arc;

    fn store() -> Store {
        Store::in_memory(Arc::new(HashEmbedder::new(16).unwrap()))
    }

    #[test]
    fn self_match_scores_one() {
        let s = store();
        let id = s.create("only record", "v").unwrap();
        let q = s.embedder().embed("only record").unwrap();
        let hits = vector_search(&s, &q, 1, 0.1).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, id);
        assert!((hits[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_beyond_corpus_returns_everything() {
        let s = store();
        for i in 0..4 {
            s.create(&format!("record {i}"), "v").unwrap();
        }
        let q = s.embedder().embed("record").unwrap();
        let hits = vector_search(&s, &q, 10, 0.0).unwrap();
        assert_eq!(hits.len(), 4);
        assert!(hits.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn zero_k_is_rejected() {
        let s = store();
        let q = s.embedder().embed("x").unwrap();
        assert!(matches!(vector_search(&s, &q, 0, 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn ties_break_to_smaller_id() {
        let s = store();
        let a = s.create("same", "1").unwrap();
        let b = s.create("same", "2").unwrap();
        let q = s.embedder().embed("same").unwrap();
        let hits = vector_search(&s, &q, 2, 0.0).unwrap();
        assert_eq!(hits.iter().map(|h| h.id).collect::<Vec<_>>(), vec![a, b]);
        assert_eq!(vector_search(&s, &q, 1, 0.0).unwrap()[0].id, a);
    }

    #[test]
    fn discredited_knowledge_is_gated() {
        let s = store();
        let bad = s.create("the sky is green", "false").unwrap();
        let good = s.create("the sky is blue", "true").unwrap();
        let q = s.embedder().embed("the sky is green").unwrap();
        let x = feature(&q, &s.get(bad).unwrap().key).unwrap();
        for _ in 0..5 {
            s.apply_payoff(bad, &x, -1.0, 0.1).unwrap();
        }
        let hits = vector_search(&s, &q, 5, 0.1).unwrap();
        assert_eq!(hits.iter().map(|h| h.id).collect::<Vec<_>>(), vec![good]);
        assert_eq!(vector_search(&s, &q, 5, 0.0).unwrap()[0].id, bad);
    }

    #[test]
    fn deleted_ids_never_returned() {
        let s = store();
        let id = s.create("ephemeral", "v").unwrap();
        s.delete(id).unwrap();
        let q = s.embedder().embed("ephemeral").unwrap();
        assert!(vector_search(&s, &q, 5, 0.0).unwrap().is_empty());
    }

    fn fixture() -> (Store, Vec<KnowledgeId>) {
        let s = store();
        let ids = (0..10)
            .map(|i| {
                let topic = if i % 5 == 0 { "alpha" } else { "beta" };
                s.create(&format!("{topic} fact number {i}"), &format!("{topic}-{i}"))
                    .unwrap()
            })
            .collect();
        (s, ids)
    }

    #[test]
    fn hybrid_filter_restricts_candidates() {
        let (s, ids) = fixture();
        let f = FilterExpr::parse(r#"value CONTAINS "alpha""#).unwrap();
        let hits = hybrid_search(&s, "fact number", Some(&f), 5, 0.0).unwrap();
        assert_eq!(hits.len(), 2);
        for h in &hits {
            assert!([ids[0], ids[5]].contains(&h.id));
        }
        let nothing = FilterExpr::parse(r#"value = "gamma""#).unwrap();
        assert!(hybrid_search(&s, "fact", Some(&nothing), 5, 0.0).unwrap().is_empty());
    }

    #[test]
    fn hybrid_without_filter_is_vector_search() {
        let (s, _) = fixture();
        let q = s.embedder().embed("beta fact number 3").unwrap();
        assert_eq!(
            hybrid_search(&s, "beta fact number 3", None, 5, 0.1).unwrap(),
            vector_search(&s, &q, 5, 0.1).unwrap()
        );
    }
}
