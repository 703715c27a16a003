mod common;

use std::io::{BufReader, Write};

use common::random_pool;
use market_select::explain::{check_dump, explain};
use market_select::market::{lmsr_prices, price_shares, MarketConfig};
use market_select::pipeline::{price_rows, run, ConfigLayer, RunReport, SignalList};
use market_select::pool::{load_pool, read_pool, write_pool, LoadOptions};
use market_select::select::Decision;
use market_select::standardize::{standardize_column, StandardizeConfig};
use market_select::{Error, ExampleRecord, Pool};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn write_then_read_is_identity(seed in 0u64..10_000, n in 1usize..60, dim in 0usize..8, labels in 0usize..4) {
        let pool = random_pool(seed, n, 4, dim, 3000, labels);
        let mut buf = Vec::new();
        write_pool(&pool, &mut buf).unwrap();
        let back = read_pool(BufReader::new(&buf[..]), &LoadOptions::default()).unwrap();
        prop_assert_eq!(back.len(), pool.len());
        for (a, b) in pool.records().iter().zip(back.records()) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(&a.topic, &b.topic);
            prop_assert_eq!(a.token_length, b.token_length);
            prop_assert_eq!(&a.label, &b.label);
            match (&a.embedding, &b.embedding) {
                (Some(x), Some(y)) => {
                    for (u, v) in x.iter().zip(y) {
                        prop_assert!((u - v).abs() <= 1e-12);
                    }
                }
                (None, None) => {}
                _ => prop_assert!(false, "embedding presence changed"),
            }
            for (k, v) in &a.raw_signals {
                prop_assert!((v - b.raw_signals[k]).abs() <= 1e-12);
            }
        }
        let covered: usize = back.topics().iter().map(|t| t.members.len()).sum();
        prop_assert_eq!(covered, back.len());
    }
}

fn toy_pool() -> Pool {
    let rows: [(&str, &str, u32, f64, [f64; 2]); 6] = [
        ("a", "math", 40, 2.0, [0.0, 0.0]),
        ("b", "math", 10, 1.0, [1.0, 0.0]),
        ("c", "math", 25, 3.0, [0.0, 2.0]),
        ("d", "news", 30, 0.5, [5.0, 5.0]),
        ("e", "news", 15, 1.5, [6.0, 5.0]),
        ("f", "news", 50, 4.0, [5.0, 8.0]),
    ];
    Pool::from_records(
        rows.iter()
            .map(|(id, t, l, nll, e)| ExampleRecord::new(*id, *t, *l).with_signal("nll", *nll).with_embedding(e.to_vec()))
            .collect(),
    )
    .unwrap()
}

#[test]
fn toy_pool_with_large_budget_matches_module_oracles() {
    let pool = toy_pool();
    let cfg = ConfigLayer {
        signals: Some(SignalList::Joined("nll".into())),
        budget_tokens: Some(10_000),
        ..Default::default()
    }
    .resolve()
    .unwrap();
    let out = run(&pool, &cfg).unwrap();
    assert_eq!(out.selection.report.selected.len(), 6);
    assert_eq!(out.selection.report.tokens_used, 170);

    // oracle: robust standardization per topic, single weight 1, per-topic softmax scaled by 1/2
    let raw: Vec<f64> = pool.records().iter().map(|r| r.raw_signals["nll"]).collect();
    let (z, _) = standardize_column(&raw, &pool, &StandardizeConfig::default()).unwrap();
    // math: median 2, IQR 1 -> (0, -1, 1); news: median 1.5, IQR 1.75
    assert_eq!(&z[..3], &[0.0, -1.0, 1.0]);
    assert!((z[3] + 1.0 / 1.75).abs() < 1e-15 && z[4] == 0.0 && (z[5] - 2.5 / 1.75).abs() < 1e-15);
    for t in pool.topics() {
        let q: Vec<f64> = t.members.iter().map(|&i| z[i]).collect();
        for (&i, p) in t.members.iter().zip(lmsr_prices(&q, 2.0)) {
            assert!((out.market.prices[i] - 0.5 * p).abs() < 1e-15);
            assert_eq!(out.market.shares[i], z[i]);
        }
    }
}

#[test]
fn report_round_trips_and_replays() {
    let pool = random_pool(4, 90, 3, 4, 60, 3);
    let cfg = ConfigLayer {
        budget_tokens: Some(900),
        mode: Some("balanced".into()),
        coverage: Some(true),
        ..Default::default()
    }
    .resolve()
    .unwrap();
    let out = run(&pool, &cfg).unwrap();
    let report = RunReport::new(&pool, &cfg, &out);
    let text = serde_json::to_string(&report).unwrap();
    let back: RunReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back.config, cfg);
    assert!(report.diagnostics.coverage.is_some());
    let again = run(&pool, &back.config).unwrap();
    assert_eq!(again.selection, out.selection);
    assert_eq!(again.market, out.market);
    check_dump(&pool, &again, &price_rows(&pool, &out.market)).unwrap();
}

#[test]
fn explain_reports_admission_and_skips() {
    let pool = toy_pool();
    let cfg = ConfigLayer {
        signals: Some(SignalList::Joined("nll".into())),
        budget_tokens: Some(60),
        gamma: Some(0.0),
        ..Default::default()
    }
    .resolve()
    .unwrap();
    let out = run(&pool, &cfg).unwrap();
    let mut used = 0;
    for (pos, &i) in out.selection.ranking.iter().enumerate() {
        let id = &pool.record(i).id;
        let e = explain(&pool, &out, id).unwrap();
        assert_eq!(e.scan_position, pos + 1);
        assert_eq!(e.p, out.market.prices[i]);
        match e.decision {
            Decision::Admitted { tokens_before, tokens_after, .. } => {
                assert_eq!(tokens_before, used);
                used = tokens_after;
            }
            Decision::SkippedForBudget { remaining } => {
                assert_eq!(remaining, 60 - used);
                assert!(e.to_string().contains(&format!("only {remaining} remained")));
            }
            Decision::NotReached => unreachable!(),
        }
    }
    assert!(out.selection.decisions.iter().any(|d| matches!(d, Decision::SkippedForBudget { .. })));
    assert!(matches!(explain(&pool, &out, "zzz"), Err(Error::UnknownId(id)) if id == "zzz"));
}

#[test]
fn tampered_dump_is_detected() {
    let pool = toy_pool();
    let cfg = ConfigLayer {
        signals: Some(SignalList::Joined("nll".into())),
        budget_tokens: Some(60),
        ..Default::default()
    }
    .resolve()
    .unwrap();
    let out = run(&pool, &cfg).unwrap();
    let mut rows = price_rows(&pool, &out.market);
    rows[2].p *= 1.01;
    assert!(check_dump(&pool, &out, &rows).is_err());
}

#[test]
fn zero_alpha_topic_is_never_selected() {
    let pool = toy_pool();
    let state = price_shares(
        vec![0.0; 6],
        &pool,
        &MarketConfig {
            budgets: market_select::market::TopicBudgets::Explicit([("math".into(), 1.0), ("news".into(), 0.0)].into()),
            ..MarketConfig::default()
        },
    )
    .unwrap();
    assert!(state.prices[3..].iter().all(|p| *p == 0.0));
}

#[test]
fn missing_embeddings_fail_only_for_geometric_signals() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    for (i, t) in ["x", "x", "y"].iter().enumerate() {
        writeln!(f, r#"{{"id":"e{i}","topic":"{t}","tokens":5,"signals":{{"nll":{i}}}}}"#).unwrap();
    }
    drop(f);
    let pool = load_pool(&path, &LoadOptions::default()).unwrap();
    let nll_only = ConfigLayer {
        signals: Some(SignalList::Joined("nll".into())),
        budget_tokens: Some(10),
        ..Default::default()
    }
    .resolve()
    .unwrap();
    assert!(run(&pool, &nll_only).is_ok());
    let geometric = ConfigLayer {
        budget_tokens: Some(10),
        ..Default::default()
    }
    .resolve()
    .unwrap();
    let err = run(&pool, &geometric).unwrap_err();
    assert!(err.to_string().contains("rarity"), "{err}");
}
