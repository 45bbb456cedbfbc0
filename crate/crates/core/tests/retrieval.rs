use std::sync::Arc;

use metamem::metabolism::ContextFeature;
use metamem::retrieval::{hybrid_search, vector_search};
use metamem::{Embedder, HashEmbedder, KnowledgeId, Store, Vector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 24] = [
    "amber", "basalt", "cobalt", "delta", "ember", "fjord", "garnet", "harbor", "iris", "jade",
    "kelp", "lumen", "mica", "nectar", "onyx", "pollen", "quartz", "reef", "slate", "tundra",
    "umber", "vapor", "willow", "zephyr",
];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..6);
    (0..n)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Scores every record and sorts; the slowest possible correct answer.
fn brute_force(store: &Store, q: &Vector, k: usize, min_score: f64) -> Vec<KnowledgeId> {
    let qn = q.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut all: Vec<(f64, KnowledgeId)> = store
        .list()
        .into_iter()
        .filter(|t| t.cred.score() >= min_score)
        .map(|t| {
            let kv = t.key.as_slice();
            let dot: f64 = kv.iter().zip(q.as_slice()).map(|(a, b)| a * b).sum();
            let kn = kv.iter().map(|x| x * x).sum::<f64>().sqrt();
            (dot / (kn * qn), t.id)
        })
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, id)| id).collect()
}

fn corpus(n: usize, seed: u64) -> (Store, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = Store::in_memory(Arc::new(HashEmbedder::new(32).unwrap()));
    for i in 0..n {
        store.create(&sentence(&mut rng), &format!("v{i}")).unwrap();
    }
    (store, rng)
}

#[test]
fn top_k_matches_brute_force() {
    let (store, mut rng) = corpus(1000, 42);
    let embedder = HashEmbedder::new(32).unwrap();
    for _ in 0..100 {
        let q = embedder.embed(&sentence(&mut rng)).unwrap();
        let k = rng.gen_range(1..20);
        let got: Vec<KnowledgeId> = vector_search(&store, &q, k, 0.1)
            .unwrap()
            .into_iter()
            .map(|h| h.id)
            .collect();
        assert_eq!(got, brute_force(&store, &q, k, 0.1));
    }
}

#[test]
fn gated_records_never_surface() {
    let store = Store::in_memory(Arc::new(HashEmbedder::new(32).unwrap()));
    let id = store.create("amber basalt", "v").unwrap();
    let q = store.embedder().embed("amber basalt").unwrap();
    let x = metamem::metabolism::feature(&q, &store.get(id).unwrap().key).unwrap();
    for _ in 0..5 {
        store.apply_payoff(id, &x, -1.0, 0.1).unwrap();
    }
    assert!(store.get(id).unwrap().cred.score() < 0.1);
    assert!(vector_search(&store, &q, 5, 0.1).unwrap().is_empty());
    assert_eq!(vector_search(&store, &q, 5, 0.0).unwrap().len(), 1);
    assert!(hybrid_search(&store, "amber basalt", None, 5, 0.1)
        .unwrap()
        .is_empty());
}

#[test]
fn invalid_parameters_are_domain_errors() {
    let (store, _) = corpus(3, 1);
    let q = store.embedder().embed("x").unwrap();
    assert!(vector_search(&store, &q, 0, 0.1).is_err());
    assert!(vector_search(&store, &q, 1, 1.5).is_err());
}

fn payoff_feature(store: &Store, id: KnowledgeId) -> ContextFeature {
    let t = store.get(id).unwrap();
    metamem::metabolism::feature(&t.key, &t.key).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn smaller_k_is_a_prefix(seed in any::<u64>(), k in 1usize..15) {
        let (store, mut rng) = corpus(60, seed);
        let q = store.embedder().embed(&sentence(&mut rng)).unwrap();
        let small = vector_search(&store, &q, k, 0.1).unwrap();
        let large = vector_search(&store, &q, k + 1, 0.1).unwrap();
        prop_assert_eq!(&large[..small.len()], &small[..]);
    }

    #[test]
    fn raising_credibility_never_drops_a_hit(seed in any::<u64>(), pick in 0usize..40) {
        let (store, mut rng) = corpus(40, seed);
        let q = store.embedder().embed(&sentence(&mut rng)).unwrap();
        let before = vector_search(&store, &q, 5, 0.1).unwrap();
        let id = store.list()[pick].id;
        let x = payoff_feature(&store, id);
        store.apply_payoff(id, &x, 1.0, 0.1).unwrap();
        let after = vector_search(&store, &q, 5, 0.1).unwrap();
        // similarity alone ranks hits, so a credibility boost changes nothing
        prop_assert_eq!(before, after);
    }
}
