mod common;

use common::{random_pool, rng};
use market_select::pool::ExampleRecord;
use market_select::signals::{diversity_centroid, diversity_combined, rarity_knn, DiversityParams, KnnParams, SignalError};
use market_select::Pool;
use proptest::prelude::*;
use rand::Rng;

/// O(N^2) reference: sort all within-topic distances and average the k smallest.
fn brute_rarity(pool: &Pool, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; pool.len()];
    for t in pool.topics() {
        let kk = k.min(t.members.len().saturating_sub(1));
        for &i in &t.members {
            if kk == 0 {
                continue;
            }
            let a = pool.record(i).embedding.as_ref().unwrap();
            let mut d: Vec<f64> = t
                .members
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| {
                    let b = pool.record(j).embedding.as_ref().unwrap();
                    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
                })
                .collect();
            d.sort_by(f64::total_cmp);
            out[i] = d[..kk].iter().sum::<f64>() / kk as f64;
        }
    }
    out
}

fn brute_centroid(pool: &Pool) -> Vec<f64> {
    let mut out = vec![0.0; pool.len()];
    for t in pool.topics() {
        let d = pool.embedding_dim().unwrap();
        let mut mean = vec![0.0; d];
        for &i in &t.members {
            for (m, x) in mean.iter_mut().zip(pool.record(i).embedding.as_ref().unwrap()) {
                *m += x / t.members.len() as f64;
            }
        }
        for &i in &t.members {
            let e = pool.record(i).embedding.as_ref().unwrap();
            out[i] = e.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>().sqrt();
        }
    }
    out
}

#[test]
fn knn_matches_brute_force() {
    let mut r = rng(21);
    for seed in 0..20 {
        let n = r.random_range(2..=200);
        let d = r.random_range(1..=16);
        let topics = r.random_range(1..=4);
        let k = r.random_range(1..=12);
        let pool = random_pool(seed, n, topics, d, 10, 0);
        let fast = rarity_knn(&pool, KnnParams::new(k)).unwrap();
        let slow = brute_rarity(&pool, k);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-9, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn centroid_matches_brute_force() {
    for seed in 0..10 {
        let pool = random_pool(seed, 80, 3, 7, 10, 0);
        let fast = diversity_centroid(&pool).unwrap();
        for (a, b) in fast.iter().zip(brute_centroid(&pool)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn strict_mode_rejects_small_topics() {
    let pool = random_pool(1, 6, 2, 3, 10, 0);
    let err = rarity_knn(&pool, KnnParams { k: 5, clamp: false }).unwrap_err();
    assert!(matches!(err, SignalError::TopicTooSmall { .. }));
}

fn transformed(pool: &Pool, scale: f64, shift: &[f64], rotate: bool) -> Pool {
    let recs = pool
        .records()
        .iter()
        .map(|r| {
            let mut e: Vec<f64> = r.embedding.as_ref().unwrap().iter().zip(shift).map(|(x, s)| scale * x + s).collect();
            if rotate {
                // 90 degree rotation of the first coordinate plane
                let (a, b) = (e[0], e[1]);
                e[0] = -b;
                e[1] = a;
            }
            ExampleRecord::new(r.id.clone(), r.topic.clone(), r.token_length).with_embedding(e)
        })
        .collect();
    Pool::from_records(recs).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn geometric_signals_are_rigid_motion_invariant(seed in 0u64..1000, scale in 0.1f64..10.0, c in -5.0f64..5.0) {
        let pool = random_pool(seed, 30, 2, 4, 10, 0);
        let shift = vec![c, -c, 2.0 * c, 0.5];
        let moved = transformed(&pool, 1.0, &shift, true);
        let scaled = transformed(&pool, scale, &[0.0; 4], false);
        let base_r = rarity_knn(&pool, KnnParams::new(3)).unwrap();
        let base_c = diversity_centroid(&pool).unwrap();
        for (a, b) in base_r.iter().zip(rarity_knn(&moved, KnnParams::new(3)).unwrap()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in base_c.iter().zip(diversity_centroid(&moved).unwrap()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in base_r.iter().zip(rarity_knn(&scaled, KnnParams::new(3)).unwrap()) {
            prop_assert!((scale * a - b).abs() < 1e-9 * scale.max(1.0));
        }
        for (a, b) in base_c.iter().zip(diversity_centroid(&scaled).unwrap()) {
            prop_assert!((scale * a - b).abs() < 1e-9 * scale.max(1.0));
        }
    }

    #[test]
    fn rarity_is_nonnegative_and_monotone_in_k(seed in 0u64..1000) {
        let pool = random_pool(seed, 25, 1, 3, 10, 0);
        let r2 = rarity_knn(&pool, KnnParams::new(2)).unwrap();
        let r5 = rarity_knn(&pool, KnnParams::new(5)).unwrap();
        for (a, b) in r2.iter().zip(&r5) {
            prop_assert!(*a >= 0.0);
            prop_assert!(b + 1e-12 >= *a);
        }
    }

    #[test]
    fn combined_diversity_is_linear(
        cent in prop::collection::vec(0.0f64..10.0, 12),
        rare in prop::collection::vec(0.0f64..10.0, 12),
        extra in prop::collection::vec(0.0f64..10.0, 12),
        c in 0.0f64..4.0,
        alpha_cent in 0.0f64..1.0,
    ) {
        let params = DiversityParams { alpha_cent, alpha_knn: 1.0 - alpha_cent };
        let base = diversity_combined(&cent, &rare, params).unwrap();
        let mixed: Vec<f64> = cent.iter().zip(&extra).map(|(a, b)| a + c * b).collect();
        let lhs = diversity_combined(&mixed, &rare, params).unwrap();
        for i in 0..12 {
            prop_assert!((lhs[i] - (base[i] + c * alpha_cent * extra[i])).abs() < 1e-12);
        }
    }
}
