mod common;

use std::collections::HashMap;

use common::{toy_grads_fd, RefCache};
use mpemb::toy::loss_and_grads;
use mpemb::trace::replay_grid;
use mpemb::{
    apply_rowwise_adagrad, apply_sgd, dedup, fake_quantize_row, gen_phased_trace, gen_zipf_trace,
    AccessTrace, CacheConfig, GradientBatch, HashKind, MixedPrecisionEmbedding, Precision,
    ReplacementPolicy, ReplayConfig, RngStream, RoundingMode, RowWiseAdagrad, UpdateOutcome,
};
use proptest::prelude::*;

fn policy() -> impl Strategy<Value = ReplacementPolicy> {
    prop_oneof![Just(ReplacementPolicy::Lru), Just(ReplacementPolicy::Lfu)]
}

fn hash() -> impl Strategy<Value = HashKind> {
    prop_oneof![Just(HashKind::Modulo), Just(HashKind::Multiplicative)]
}

fn precision() -> impl Strategy<Value = Precision> {
    prop::sample::select(Precision::ALL.to_vec())
}

fn rounding() -> impl Strategy<Value = RoundingMode> {
    prop_oneof![Just(RoundingMode::Nearest), Just(RoundingMode::Stochastic)]
}

/// A small embedding configuration plus a trace of index batches over it.
#[derive(Debug, Clone)]
struct Scenario {
    rows: usize,
    sets: usize,
    assoc: usize,
    policy: ReplacementPolicy,
    hash: HashKind,
    batches: Vec<Vec<usize>>,
}

fn scenario() -> impl Strategy<Value = Scenario> {
    (2usize..=48, prop::sample::select(vec![1usize, 2, 4]), 1usize..=8, policy(), hash())
        .prop_flat_map(|(rows, assoc, sets, policy, hash)| {
            let batch = prop::collection::vec(0..rows, 1..12);
            prop::collection::vec(batch, 1..40).prop_map(move |batches| Scenario {
                rows,
                sets,
                assoc,
                policy,
                hash,
                batches,
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    /// Capacity, placement, distinct tags, victim minimality and the
    /// direct-mapped LRU rule, checked after every update.
    #[test]
    fn cache_invariants(sc in scenario()) {
        let cfg = CacheConfig::new(sc.sets, sc.assoc, 1, sc.policy, sc.hash).unwrap();
        let mut emb = MixedPrecisionEmbedding::from_rows(
            &vec![0.0; sc.rows], 1, Precision::Int8, Some(cfg), RoundingMode::Nearest, 3, 0,
        ).unwrap();
        let mut reference = RefCache::new(sc.sets, sc.assoc, sc.policy, sc.hash);
        for (t, b) in sc.batches.iter().enumerate() {
            let mut rows = b.clone();
            rows.sort_unstable();
            rows.dedup();
            for i in rows {
                let before: Vec<(Option<usize>, Option<u64>)> = {
                    let c = emb.cache().unwrap();
                    (0..sc.sets * sc.assoc).map(|w| (c.tag(w), c.way_priority(w))).collect()
                };
                let out = emb.update(i, &[i as f32]).unwrap();
                let (want, _) = reference.update(i, &[i as f32], t as u64);
                prop_assert_eq!(out, want);
                let c = emb.cache().unwrap();
                let set = c.set_of(i);
                if let UpdateOutcome::Evicted { victim } = out {
                    let ways = set * sc.assoc..(set + 1) * sc.assoc;
                    let vp = before.iter().find(|(tag, _)| *tag == Some(victim)).unwrap().1.unwrap();
                    prop_assert!(before[ways].iter().all(|(_, p)| p.unwrap() >= vp));
                }
                if sc.assoc == 1 && sc.policy == ReplacementPolicy::Lru {
                    prop_assert_ne!(out, UpdateOutcome::Bypassed);
                }
                prop_assert!(c.len() <= sc.sets * sc.assoc);
                for s in 0..sc.sets {
                    let tags: Vec<usize> =
                        (s * sc.assoc..(s + 1) * sc.assoc).filter_map(|w| c.tag(w)).collect();
                    let mut uniq = tags.clone();
                    uniq.sort_unstable();
                    uniq.dedup();
                    prop_assert_eq!(uniq.len(), tags.len());
                    for r in tags {
                        prop_assert_eq!(c.set_of(r), s);
                    }
                }
            }
            emb.step();
        }
    }

    /// fetch(i) always equals a naive map model: exact FP32 while cached,
    /// otherwise the fake-quantized value written with the same stream key.
    #[test]
    fn authority_matches_map_model(
        sc in scenario(),
        p in precision(),
        mode in rounding(),
        dim in 1usize..6,
        seed in any::<u64>(),
        flush_every in 0usize..6,
        lr in 0.01f32..0.5,
    ) {
        let cfg = CacheConfig::new(sc.sets, sc.assoc, dim, sc.policy, sc.hash).unwrap();
        let init: Vec<f32> = (0..sc.rows * dim).map(|k| ((k * 37 % 101) as f32 - 50.0) / 25.0).collect();
        let mut emb = MixedPrecisionEmbedding::from_rows(&init, dim, p, Some(cfg), mode, seed, 7).unwrap();
        let fq = |x: &[f32], row: usize, it: u64| {
            fake_quantize_row(x, p, mode, &mut RngStream::keyed(seed, 7, row as u64, it)).unwrap()
        };
        let mut shadow: HashMap<usize, Vec<f32>> = (0..sc.rows)
            .map(|i| (i, fq(&init[i * dim..(i + 1) * dim], i, u64::MAX)))
            .collect();
        let mut cached: HashMap<usize, bool> = HashMap::new();

        for (t, b) in sc.batches.iter().enumerate() {
            let mut batch = GradientBatch::new(lr);
            for (k, &i) in b.iter().enumerate() {
                batch.push(i, (0..dim).map(|j| ((k + j) as f32 * 0.7).sin()).collect());
            }
            let batch = dedup(&batch);
            let it = emb.iteration();
            let outcomes = apply_sgd(&mut emb, &batch).unwrap();
            for ((i, g), out) in batch.entries.iter().zip(outcomes) {
                let x: Vec<f32> = shadow[i].iter().zip(g).map(|(v, g)| v - lr * g).collect();
                match out {
                    UpdateOutcome::Hit | UpdateOutcome::Admitted => {
                        shadow.insert(*i, x);
                        cached.insert(*i, true);
                    }
                    UpdateOutcome::Evicted { victim } => {
                        let v = fq(&shadow[&victim], victim, it);
                        shadow.insert(victim, v);
                        cached.insert(victim, false);
                        shadow.insert(*i, x);
                        cached.insert(*i, true);
                    }
                    UpdateOutcome::Bypassed | UpdateOutcome::Uncached => {
                        shadow.insert(*i, fq(&x, *i, it));
                    }
                }
            }
            emb.step();
            if flush_every > 0 && t % flush_every == 0 {
                let it = emb.iteration();
                let mut resident: Vec<usize> = cached.iter().filter(|(_, &c)| c).map(|(&i, _)| i).collect();
                resident.sort_unstable();
                for i in resident {
                    let v = fq(&shadow[&i], i, it);
                    shadow.insert(i, v);
                    cached.insert(i, false);
                }
                emb.flush().unwrap();
                let once: Vec<Vec<f32>> = (0..sc.rows).map(|i| emb.fetch(i).unwrap()).collect();
                emb.flush().unwrap();
                let twice: Vec<Vec<f32>> = (0..sc.rows).map(|i| emb.fetch(i).unwrap()).collect();
                prop_assert_eq!(once, twice);
            }
            for i in 0..sc.rows {
                prop_assert_eq!(emb.is_resident(i), cached.get(&i).copied().unwrap_or(false));
                let got = emb.fetch(i).unwrap();
                let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&got), bits(&shadow[&i]), "row {} iter {}", i, t);
            }
        }
    }

    /// FP32 without a cache stores exactly what it is given.
    #[test]
    fn fp32_uncached_identity(rows in prop::collection::vec(-1e30f32..1e30, 1..40), dim in 1usize..5) {
        let n = rows.len() / dim;
        prop_assume!(n > 0);
        let mut emb = MixedPrecisionEmbedding::from_rows(
            &rows[..n * dim], dim, Precision::Fp32, None, RoundingMode::Stochastic, 0, 0,
        ).unwrap();
        for i in 0..n {
            prop_assert_eq!(emb.fetch(i).unwrap(), rows[i * dim..(i + 1) * dim].to_vec());
            let x: Vec<f32> = rows[i * dim..(i + 1) * dim].iter().map(|v| v * 0.5).collect();
            emb.update(i, &x).unwrap();
            prop_assert_eq!(emb.fetch(i).unwrap(), x);
        }
    }

    /// Sparse SGD on an FP32, uncached table equals dense SGD on the touched rows.
    #[test]
    fn sgd_matches_dense_reference(
        batches in prop::collection::vec(prop::collection::vec((0usize..20, -1.0f32..1.0), 1..30), 1..10),
        lr in 0.001f32..1.0,
    ) {
        let dim = 3;
        let init: Vec<f32> = (0..20 * dim).map(|k| k as f32 * 0.1).collect();
        let mut emb = MixedPrecisionEmbedding::from_rows(&init, dim, Precision::Fp32, None, RoundingMode::Nearest, 0, 0).unwrap();
        let mut dense = init.clone();
        for b in &batches {
            let mut batch = GradientBatch::new(lr);
            let mut grad = vec![0.0f32; 20 * dim];
            let mut touched = [false; 20];
            for &(i, g) in b {
                let row = vec![g, -g, 2.0 * g];
                for j in 0..dim {
                    grad[i * dim + j] += row[j];
                }
                touched[i] = true;
                batch.push(i, row);
            }
            apply_sgd(&mut emb, &dedup(&batch)).unwrap();
            emb.step();
            for i in (0..20).filter(|&i| touched[i]) {
                for j in 0..dim {
                    dense[i * dim + j] -= lr * grad[i * dim + j];
                }
            }
        }
        for i in 0..20 {
            prop_assert_eq!(emb.fetch(i).unwrap(), dense[i * dim..(i + 1) * dim].to_vec());
        }
    }

    /// Row-wise AdaGrad momentum never decreases.
    #[test]
    fn adagrad_momentum_monotone(
        batches in prop::collection::vec(prop::collection::vec((0usize..8, -10.0f32..10.0), 0..10), 1..20),
    ) {
        let mut emb = MixedPrecisionEmbedding::from_rows(&[0.0; 16], 2, Precision::Fp32, None, RoundingMode::Nearest, 0, 0).unwrap();
        let mut state = RowWiseAdagrad::new(8);
        for b in batches {
            let mut batch = GradientBatch::new(0.1);
            for (i, g) in b {
                batch.push(i, vec![g, g * 0.5]);
            }
            let before = state.momentum.clone();
            apply_rowwise_adagrad(&mut emb, &dedup(&batch), &mut state).unwrap();
            emb.step();
            prop_assert!(state.momentum.iter().zip(&before).all(|(a, b)| a >= b));
        }
    }
}

fn trace_suite() -> Vec<AccessTrace> {
    let mut v = Vec::new();
    for (k, e) in [0.8, 1.05, 1.3].into_iter().enumerate() {
        v.push(gen_zipf_trace(20_000, 150, 256, e, k as u64).unwrap());
        v.push(gen_phased_trace(20_000, 4, 40, 256, e, 10 + k as u64).unwrap());
    }
    v
}

#[test]
fn lfu_hit_rate_monotone_in_ratio() {
    let ratios = [0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0];
    for (k, t) in trace_suite().iter().enumerate() {
        for assoc in [1, 4, 32] {
            for hash in [HashKind::Modulo, HashKind::Multiplicative] {
                let cfgs: Vec<ReplayConfig> = ratios
                    .iter()
                    .map(|&r| ReplayConfig {
                        hash,
                        ..ReplayConfig::new(ReplacementPolicy::Lfu, assoc, r)
                    })
                    .collect();
                let h: Vec<f64> = replay_grid(t, &cfgs).into_iter().map(|r| r.unwrap().hit_rate).collect();
                assert!(
                    h.windows(2).all(|w| w[1] >= w[0]),
                    "trace {k}, {assoc}-way {hash:?}: {h:?}"
                );
            }
        }
    }
}

/// Fixed capacity, associativity varied. Not a theorem: counterexamples
/// between neighbouring associativities are printed, and only the end points
/// are asserted.
#[test]
fn lfu_hit_rate_by_associativity() {
    let mut counterexamples = 0;
    for (k, t) in trace_suite().iter().enumerate() {
        for cap in [256usize, 1024] {
            let cfgs: Vec<ReplayConfig> = [1, 2, 4, 8, 16, 32]
                .iter()
                .map(|&a| ReplayConfig::new(ReplacementPolicy::Lfu, a, cap as f64 / 20_000.0))
                .collect();
            let h: Vec<f64> = replay_grid(t, &cfgs).into_iter().map(|r| r.unwrap().hit_rate).collect();
            for (a, w) in h.windows(2).enumerate() {
                if w[1] < w[0] {
                    counterexamples += 1;
                    println!("trace {k} capacity {cap}: {}-way {:.5} > {}-way {:.5}", 1 << a, w[0], 2 << a, w[1]);
                }
            }
            assert!(h[5] > h[0], "trace {k} capacity {cap}: {h:?}");
        }
    }
    println!("{counterexamples} neighbouring-associativity counterexamples");
}

/// Gradients of rows served from the FP32 cache (hit) and from the quantized
/// table (miss) both match finite differences at the fetched values.
#[test]
fn gradient_through_cache_hit_and_miss() {
    let dim = 8;
    let rows = 16;
    let init: Vec<f32> = (0..rows * dim).map(|k| ((k as f32) * 0.37).sin()).collect();
    let cfg = CacheConfig::new(2, 2, dim, ReplacementPolicy::Lfu, HashKind::Modulo).unwrap();
    let mut emb = MixedPrecisionEmbedding::from_rows(&init, dim, Precision::Int4, Some(cfg), RoundingMode::Stochastic, 1, 0).unwrap();
    for _ in 0..3 {
        let mut b = GradientBatch::new(0.05);
        b.push(0, vec![0.3; dim]);
        b.push(1, vec![-0.2; dim]);
        apply_sgd(&mut emb, &b).unwrap();
        emb.step();
    }
    assert!(emb.is_resident(0) && emb.is_resident(1));
    assert!(!emb.is_resident(5) && !emb.is_resident(9));
    for (ids, label) in [([0usize, 1, 5, 9], 1u8), ([1, 9, 0, 5], 0)] {
        let fetched: Vec<Vec<f32>> = ids.iter().map(|&i| emb.fetch(i).unwrap()).collect();
        let refs: Vec<&[f32]> = fetched.iter().map(Vec::as_slice).collect();
        let (_, grads) = loss_and_grads(&refs, label);
        let fd = toy_grads_fd(&fetched, label, 1e-5);
        for (a, n) in grads.iter().zip(&fd) {
            let diff: f64 = a.iter().zip(n).map(|(&a, n)| (a as f64 - n).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = n.iter().map(|n| n * n).sum::<f64>().sqrt();
            assert!(diff / norm.max(1e-12) < 1e-4, "{diff} vs {norm}");
        }
        let mut batch = GradientBatch::new(0.01);
        for (&i, g) in ids.iter().zip(grads) {
            batch.push(i, g);
        }
        apply_sgd(&mut emb, &dedup(&batch)).unwrap();
        emb.step();
    }
}
