mod common;

use common::{random_pool, rng};
use market_select::standardize::{StandardizedColumn, StandardizedTable};
use market_select::tune::{eg_update, signal_reward, tune_weights, DevFeedback, TuneConfig};
use market_select::{Pool, Weights};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn table(columns: Vec<(&str, Vec<f64>)>) -> StandardizedTable {
    StandardizedTable {
        tau: 2.5,
        columns: columns
            .into_iter()
            .map(|(name, values)| StandardizedColumn {
                name: name.to_string(),
                values,
                stats: Vec::new(),
            })
            .collect(),
    }
}

fn feedback(pool: &Pool, utility: &[f64]) -> DevFeedback {
    DevFeedback::new(pool.records().iter().zip(utility).map(|(r, u)| (r.id.clone(), *u)).collect()).unwrap()
}

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, 2..6)
}

proptest! {
    #[test]
    fn update_stays_on_simplex(w in weights(), eta in 0.01f64..5.0, seed in 0u64..1000) {
        let mut r = rng(seed);
        let mut current = Weights::new(w.iter().enumerate().map(|(i, v)| (format!("s{i}"), *v)).collect()).unwrap();
        for _ in 0..20 {
            let rewards: Vec<f64> = (0..w.len()).map(|_| r.random_range(0.0..1.0)).collect();
            current = eg_update(&current, &rewards, eta).unwrap();
            let v = current.values();
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(v.iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn update_ignores_reward_shifts(w in weights(), eta in 0.01f64..5.0, c in -10.0f64..10.0, seed in 0u64..1000) {
        let mut r = rng(seed);
        let start = Weights::new(w.iter().enumerate().map(|(i, v)| (format!("s{i}"), *v)).collect()).unwrap();
        let rewards: Vec<f64> = (0..w.len()).map(|_| r.random_range(0.0..1.0)).collect();
        let shifted: Vec<f64> = rewards.iter().map(|x| x + c).collect();
        let (a, b) = (eg_update(&start, &rewards, eta).unwrap(), eg_update(&start, &shifted, eta).unwrap());
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tuning_is_permutation_equivariant(seed in 0u64..1000, m in 2usize..6) {
        let pool = random_pool(seed, 60, 2, 0, 10, 0);
        let mut r = rng(seed);
        let utility: Vec<f64> = (0..pool.len()).map(|_| r.random::<f64>()).collect();
        let names: Vec<String> = (0..m).map(|i| format!("s{i}")).collect();
        let cols: Vec<Vec<f64>> = (0..m)
            .map(|_| utility.iter().map(|u| u + r.random_range(-0.5..0.5)).collect())
            .collect();
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut r);
        let forward = table(names.iter().map(String::as_str).zip(cols.iter().cloned()).collect());
        let shuffled = table(perm.iter().map(|&i| (names[i].as_str(), cols[i].clone())).collect());
        let fb = feedback(&pool, &utility);
        let cfg = TuneConfig::default();
        let a = tune_weights(&forward, &fb, &pool, &cfg, None).unwrap();
        let b = tune_weights(&shuffled, &fb, &pool, &cfg, None).unwrap();
        prop_assert_eq!(&a.rewards, &b.rewards);
        for n in &names {
            prop_assert!((a.weights.get(n).unwrap() - b.weights.get(n).unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn aligned_and_anti_aligned_rewards() {
    let pool = random_pool(1, 200, 2, 0, 10, 0);
    let mut r = rng(2);
    let utility: Vec<f64> = (0..pool.len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let neg: Vec<f64> = utility.iter().map(|u| -u).collect();
    let t = table(vec![("good", utility.clone()), ("bad", neg)]);
    let rewards = signal_reward(&t, &feedback(&pool, &utility), &pool).unwrap();
    assert_eq!(rewards[0], ("good".to_string(), 1.0));
    assert_eq!(rewards[1], ("bad".to_string(), 0.0));
}

#[test]
fn random_signal_reward_is_half() {
    let pool = random_pool(3, 1000, 1, 0, 10, 0);
    let mut r = rng(4);
    let mut total = 0.0;
    let runs = 100;
    for _ in 0..runs {
        let utility: Vec<f64> = (0..pool.len()).map(|_| r.random::<f64>()).collect();
        let noise: Vec<f64> = (0..pool.len()).map(|_| r.random::<f64>()).collect();
        let reward = signal_reward(&table(vec![("noise", noise)]), &feedback(&pool, &utility), &pool).unwrap()[0].1;
        assert!((reward - 0.5).abs() < 0.05, "single draw {reward}");
        total += reward;
    }
    assert!((total / runs as f64 - 0.5).abs() < 0.01);
}

#[test]
fn aligned_signal_dominates_after_tuning() {
    let pool = random_pool(5, 1000, 3, 0, 10, 0);
    let mut r = rng(6);
    let utility: Vec<f64> = (0..pool.len()).map(|_| r.random::<f64>()).collect();
    let mut cols = vec![("aligned", utility.clone())];
    let noise: Vec<Vec<f64>> = (0..3).map(|_| (0..pool.len()).map(|_| r.random::<f64>()).collect()).collect();
    let names = ["n0", "n1", "n2"];
    for (n, v) in names.iter().zip(noise) {
        cols.push((n, v));
    }
    let result = tune_weights(&table(cols), &feedback(&pool, &utility), &pool, &TuneConfig::default(), None).unwrap();
    let aligned = result.weights.get("aligned").unwrap();
    for n in names {
        assert!(aligned > result.weights.get(n).unwrap());
    }
    assert_eq!(result.trajectory.len(), 51);
    for row in &result.trajectory {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn noise_signals_stay_near_uniform() {
    let pool = random_pool(7, 1000, 2, 0, 10, 0);
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let utility: Vec<f64> = (0..pool.len()).map(|_| r.random::<f64>()).collect();
        let cols: Vec<(&str, Vec<f64>)> = ["a", "b", "c", "d"]
            .into_iter()
            .map(|n| (n, (0..pool.len()).map(|_| r.random::<f64>()).collect()))
            .collect();
        let result = tune_weights(&table(cols), &feedback(&pool, &utility), &pool, &TuneConfig::default(), None).unwrap();
        for w in result.weights.values() {
            assert!((w - 0.25).abs() <= 0.15, "seed {seed}: {w}");
        }
    }
}

#[test]
fn zero_rounds_returns_initial_weights() {
    let pool = random_pool(8, 10, 1, 0, 10, 0);
    let u: Vec<f64> = (0..10).map(f64::from).collect();
    let t = table(vec![("x", u.clone()), ("y", u.iter().map(|v| -v).collect())]);
    let cfg = TuneConfig { rounds: 0, ..TuneConfig::default() };
    let result = tune_weights(&t, &feedback(&pool, &u), &pool, &cfg, None).unwrap();
    assert_eq!(result.weights.values(), vec![0.5, 0.5]);
}

#[test]
fn too_few_covered_ids() {
    let pool = random_pool(9, 10, 1, 0, 10, 0);
    let t = table(vec![("x", vec![0.0; 10])]);
    let fb = DevFeedback::new([(pool.record(0).id.clone(), 1.0), (pool.record(1).id.clone(), 2.0)].into()).unwrap();
    assert!(signal_reward(&t, &fb, &pool).is_err());
}
