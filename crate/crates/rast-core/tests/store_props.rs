//! Property tests for the pattern memory: capacity and momentum invariants
//! under adversarial operation sequences, cache coherence across index
//! rebuilds, and approximate-index recall on clustered data.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rast_core::store::{similarity, BankKind, IndexChoice, MemoryBank, StorePolicy};

const DIM: usize = 3;
const CAP: usize = 24;

#[derive(Debug, Clone)]
enum Op {
    Update(Vec<Vec<f64>>),
    Momentum(Vec<f64>),
    Prune,
    RebuildFlat,
    RebuildIvf,
    Search(Vec<f64>, usize),
    Observe(Vec<f64>),
}

fn vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, DIM)
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        prop::collection::vec(vector(), 1..8).prop_map(Op::Update),
        vector().prop_map(Op::Momentum),
        Just(Op::Prune),
        Just(Op::RebuildFlat),
        Just(Op::RebuildIvf),
        (vector(), 1usize..8).prop_map(|(q, k)| Op::Search(q, k)),
        vector().prop_map(Op::Observe),
    ]
}

fn test_policy() -> StorePolicy {
    StorePolicy {
        capacity: CAP,
        decay_epochs: 5,
        recent_query_cap: 16,
        lru_capacity: 8,
        kmeans_iters: 5,
        ..StorePolicy::default()
    }
}

fn brute_force(bank: &MemoryBank<f64>, query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = bank
        .entries()
        .iter()
        .enumerate()
        .map(|(id, e)| (id, similarity(query, &e.vector).unwrap()))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Every search answer must match the current entries exactly: a Flat
    // index reproduces brute force, an approximate index still reports
    // true similarities in rank order. Capacity holds after every
    // policy-driven mutation and each momentum update distributes mass 1.
    #[test]
    fn bank_invariants_under_op_sequences(ops in prop::collection::vec(op(), 1..40)) {
        let mut bank = MemoryBank::<f64>::new(BankKind::Spatial, DIM, test_policy());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut epoch = 0u32;
        for op in ops {
            match op {
                Op::Update(fresh) => {
                    epoch += 1;
                    bank.update_bank(&fresh, epoch).unwrap();
                    prop_assert!(bank.len() <= CAP);
                }
                Op::Momentum(q) => {
                    let hits = bank.search_topk(&q, 3).unwrap();
                    if !hits.is_empty() {
                        let items: Vec<(usize, f64)> =
                            hits.iter().map(|h| (h.id, h.similarity)).collect();
                        let shares = bank.update_momentum(&items, 0.5, 0.1).unwrap();
                        let mass: f64 = shares.iter().sum();
                        prop_assert!((mass - 1.0).abs() < 1e-9, "mass {mass}");
                        prop_assert!(shares.iter().all(|s| *s >= 0.0));
                    }
                }
                Op::Prune => {
                    epoch += 1;
                    bank.prune_and_decay(epoch);
                    prop_assert!(bank.len() <= CAP);
                }
                Op::RebuildFlat => {
                    bank.build_index(IndexChoice::Flat, None, None, 3).unwrap();
                }
                Op::RebuildIvf => {
                    bank.build_index(IndexChoice::Ivf, None, None, 3).unwrap();
                }
                Op::Search(q, k) => {
                    let hits = bank.search_topk(&q, k).unwrap();
                    prop_assert!(hits.len() <= k.min(bank.len()));
                    for w in hits.windows(2) {
                        prop_assert!(
                            w[0].similarity > w[1].similarity
                                || (w[0].similarity == w[1].similarity && w[0].id < w[1].id)
                        );
                    }
                    for h in &hits {
                        let true_sim = similarity(&q, &bank.entries()[h.id].vector).unwrap();
                        prop_assert!((true_sim - h.similarity).abs() < 1e-12);
                        prop_assert_eq!(h.momentum, bank.entries()[h.id].momentum);
                    }
                    if bank.index_kind() == "flat" {
                        let expected = brute_force(&bank, &q, k);
                        let got: Vec<(usize, f64)> =
                            hits.iter().map(|h| (h.id, h.similarity)).collect();
                        prop_assert_eq!(got, expected);
                    }
                }
                Op::Observe(q) => {
                    bank.observe_query(&q, &mut rng).unwrap();
                }
            }
        }
    }

    // Repeating the identical search must hit the cache and return the
    // same ranking; interleaving a rebuild in between must not change the
    // answer either, because the entries did not change.
    #[test]
    fn cache_and_rebuild_preserve_flat_answers(
        vectors in prop::collection::vec(vector(), 1..20),
        query in vector(),
        k in 1usize..6,
    ) {
        let mut bank = MemoryBank::<f64>::new(BankKind::Temporal, DIM, test_policy());
        for (i, v) in vectors.iter().enumerate() {
            bank.insert_raw(v.clone(), 1.0 + i as f64, 0, 1).unwrap();
        }
        let expected = brute_force(&bank, &query, k);
        let collect = |hits: Vec<rast_core::store::SearchHit<f64>>| -> Vec<(usize, f64)> {
            hits.into_iter().map(|h| (h.id, h.similarity)).collect()
        };
        let cold = collect(bank.search_topk(&query, k).unwrap());
        let cached = collect(bank.search_topk(&query, k).unwrap());
        prop_assert_eq!(&cold, &expected);
        prop_assert_eq!(&cached, &expected);
        let (hits, _) = bank.cache_stats();
        prop_assert!(hits >= 1);

        bank.build_index(IndexChoice::Flat, None, None, 9).unwrap();
        let after = collect(bank.search_topk(&query, k).unwrap());
        prop_assert_eq!(&after, &expected);
    }
}

// Recall of the inverted-file index on separable clustered data: queries
// drawn near cluster centers must recover at least 90 percent of the true
// top-5 across the query set.
#[test]
fn ivf_recall_at_5_on_clustered_vectors() {
    let dim = 32;
    let n_clusters = 10;
    let per_cluster = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let centers: Vec<Vec<f64>> = (0..n_clusters)
        .map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect())
        .collect();
    let mut bank = MemoryBank::<f64>::new(
        BankKind::Spatial,
        dim,
        StorePolicy {
            capacity: 4000,
            ..StorePolicy::default()
        },
    );
    for c in &centers {
        for _ in 0..per_cluster {
            let v: Vec<f64> = c.iter().map(|x| x + rng.random_range(-0.5..0.5)).collect();
            bank.insert_raw(v, 1.0, 0, 1).unwrap();
        }
    }
    let report = bank
        .build_index(IndexChoice::Ivf, None, None, 7)
        .unwrap();
    assert_eq!(report.built, "ivf");
    assert!(!report.downgraded);
    assert_eq!(report.n_list, 45);
    assert_eq!(report.n_probe, 12);

    let mut found = 0usize;
    let mut total = 0usize;
    for _ in 0..100 {
        let c = &centers[rng.random_range(0..n_clusters)];
        let q: Vec<f64> = c.iter().map(|x| x + rng.random_range(-0.5..0.5)).collect();
        let truth: Vec<usize> = brute_force_ids(&bank, &q, 5);
        let hits = bank.search_topk(&q, 5).unwrap();
        total += truth.len();
        for h in &hits {
            if truth.contains(&h.id) {
                found += 1;
            }
        }
    }
    let recall = found as f64 / total as f64;
    assert!(recall >= 0.9, "recall@5 = {recall}");
}

fn brute_force_ids(bank: &MemoryBank<f64>, query: &[f64], k: usize) -> Vec<usize> {
    let mut all: Vec<(usize, f64)> = bank
        .entries()
        .iter()
        .enumerate()
        .map(|(id, e)| (id, similarity(query, &e.vector).unwrap()))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all.into_iter().map(|(id, _)| id).collect()
}

// Same entries, same seed: the rebuilt index must route identical queries
// identically, keeping full runs reproducible.
#[test]
fn rebuild_with_same_seed_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vectors: Vec<Vec<f64>> = (0..300)
        .map(|_| (0..8).map(|_| rng.random_range(-4.0..4.0)).collect())
        .collect();
    let make = || {
        let mut b = MemoryBank::<f64>::new(BankKind::Spatial, 8, StorePolicy::default());
        for v in &vectors {
            b.insert_raw(v.clone(), 1.0, 0, 1).unwrap();
        }
        b.build_index(IndexChoice::Ivf, None, None, 21).unwrap();
        b
    };
    let a = make();
    let b = make();
    let mut qrng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let q: Vec<f64> = (0..8).map(|_| qrng.random_range(-4.0..4.0)).collect();
        let ha: Vec<(usize, u64)> = a
            .search_topk(&q, 5)
            .unwrap()
            .into_iter()
            .map(|h| (h.id, h.similarity.to_bits()))
            .collect();
        let hb: Vec<(usize, u64)> = b
            .search_topk(&q, 5)
            .unwrap()
            .into_iter()
            .map(|h| (h.id, h.similarity.to_bits()))
            .collect();
        assert_eq!(ha, hb);
    }
}
