mod common;

use common::{random_pool, rng};
use market_select::market::{price_shares, MarketConfig};
use market_select::select::{
    balance_score, greedy_selection, rank_descending, score_rho, select, Decision, LabelFloor, Mode, SelectionConfig,
};
use market_select::{MarketState, Pool};
use proptest::prelude::*;
use rand::Rng;

fn market(pool: &Pool, seed: u64) -> MarketState {
    let mut r = rng(seed);
    let q = (0..pool.len()).map(|_| r.random_range(-3.0..3.0)).collect();
    price_shares(q, pool, &MarketConfig::default()).unwrap()
}

fn config() -> impl Strategy<Value = SelectionConfig> {
    (1u64..400, 0.0f64..3.0, prop::bool::ANY, 0usize..6, prop::option::of(1usize..30)).prop_map(
        |(budget, gamma, balanced, floor, max_examples)| SelectionConfig {
            budget_tokens: budget,
            gamma,
            mode: if balanced { Mode::Balanced } else { Mode::PricePerToken },
            label_floor: if floor == 5 { LabelFloor::Auto } else { LabelFloor::Count(floor) },
            max_examples,
        },
    )
}

proptest! {
    #[test]
    fn never_exceeds_budget(seed in 0u64..10_000, n in 1usize..80, cfg in config()) {
        let pool = random_pool(seed, n, 3, 0, 60, 4);
        let sel = select(&market(&pool, seed), &pool, &cfg).unwrap();
        prop_assert!(sel.report.tokens_used <= cfg.budget_tokens);
        let sum: u64 = sel.report.selected.iter().map(|id| u64::from(pool.record(pool.index_of(id).unwrap()).token_length)).sum();
        prop_assert_eq!(sum, sel.report.tokens_used);
        if let Some(m) = cfg.max_examples {
            prop_assert!(sel.report.selected.len() <= m);
        }
    }

    #[test]
    fn greedy_is_maximal_and_ordered(seed in 0u64..10_000, n in 1usize..80, budget in 1u64..400, gamma in 0.0f64..3.0) {
        let pool = random_pool(seed, n, 2, 0, 60, 0);
        let state = market(&pool, seed);
        let cfg = SelectionConfig { gamma, ..SelectionConfig::new(budget) };
        let sel = greedy_selection(&state, &pool, &cfg).unwrap();
        let remaining = budget - sel.report.tokens_used;
        let chosen: Vec<usize> = sel.report.selected.iter().map(|id| pool.index_of(id).unwrap()).collect();
        let worst = chosen.iter().map(|&i| sel.rho[i]).fold(f64::INFINITY, f64::min);
        for i in 0..pool.len() {
            if !chosen.contains(&i) {
                // anything left out must not fit, ...
                prop_assert!(u64::from(pool.record(i).token_length) > remaining);
                // ... and nothing that fits outranks the whole selection
                if u64::from(pool.record(i).token_length) <= remaining {
                    prop_assert!(sel.rho[i] <= worst);
                }
            }
        }
        for w in chosen.windows(2) {
            prop_assert!(sel.rho[w[0]] > sel.rho[w[1]] || (sel.rho[w[0]] == sel.rho[w[1]] && w[0] < w[1]));
        }
    }

    #[test]
    fn skipped_examples_record_the_remaining_budget(seed in 0u64..10_000, budget in 1u64..300) {
        let pool = random_pool(seed, 40, 2, 0, 60, 0);
        let sel = greedy_selection(&market(&pool, seed), &pool, &SelectionConfig::new(budget)).unwrap();
        let mut used = 0u64;
        for &i in &sel.ranking {
            let len = u64::from(pool.record(i).token_length);
            match sel.decisions[i] {
                Decision::Admitted { tokens_before, tokens_after, .. } => {
                    prop_assert_eq!(tokens_before, used);
                    used += len;
                    prop_assert_eq!(tokens_after, used);
                }
                Decision::SkippedForBudget { remaining } => {
                    prop_assert_eq!(remaining, budget - used);
                    prop_assert!(len > remaining);
                }
                Decision::NotReached => prop_assert!(false, "no cardinality cap was set"),
            }
        }
    }

    #[test]
    fn longer_never_outranks_equal_priced_shorter(p in 1e-6f64..1.0, short in 1u32..500, extra in 1u32..500, g1 in 0.0f64..3.0, dg in 0.0f64..3.0) {
        let pool = Pool::from_records(vec![
            market_select::ExampleRecord::new("a", "t", short),
            market_select::ExampleRecord::new("b", "t", short + extra),
        ]).unwrap();
        for gamma in [g1, g1 + dg] {
            let rho = score_rho(&[p, p], &pool, gamma);
            prop_assert!(rho[0] >= rho[1]);
            let order = rank_descending(&rho);
            prop_assert_eq!(order[0], 0);
        }
        // the short example's advantage grows with gamma
        let lo = score_rho(&[p, p], &pool, g1);
        let hi = score_rho(&[p, p], &pool, g1 + dg);
        prop_assert!(hi[0] / hi[1] >= lo[0] / lo[1] * (1.0 - 1e-12));
    }

    #[test]
    fn zero_floor_balanced_equals_greedy(seed in 0u64..10_000, budget in 1u64..400, gamma in 0.0f64..3.0) {
        let pool = random_pool(seed, 50, 3, 0, 60, 3);
        let state = market(&pool, seed);
        let greedy = SelectionConfig { gamma, ..SelectionConfig::new(budget) };
        let balanced = SelectionConfig { mode: Mode::Balanced, label_floor: LabelFloor::Count(0), ..greedy.clone() };
        let a = select(&state, &pool, &greedy).unwrap();
        let b = select(&state, &pool, &balanced).unwrap();
        prop_assert_eq!(a.report, b.report);
        prop_assert_eq!(a.decisions, b.decisions);
    }

    #[test]
    fn satisfiable_floors_are_met(seed in 0u64..10_000, floor in 1usize..5) {
        let pool = random_pool(seed, 120, 2, 0, 20, 4);
        let labels = pool.labels().unwrap();
        let supply = labels.iter().map(|l| pool.records().iter().filter(|r| r.label.as_ref() == Some(l)).count()).min().unwrap();
        prop_assume!(supply >= floor);
        let cfg = SelectionConfig { mode: Mode::Balanced, label_floor: LabelFloor::Count(floor), ..SelectionConfig::new(pool.total_tokens()) };
        let sel = select(&market(&pool, seed), &pool, &cfg).unwrap();
        for l in &labels {
            prop_assert!(sel.report.per_label.get(l).copied().unwrap_or(0) >= floor);
        }
        let score = balance_score(&sel.report, &pool).unwrap();
        prop_assert!((0.0..=1.0).contains(&score));
    }
}

#[test]
fn selection_is_deterministic_across_thread_pools() {
    let pool = random_pool(5, 500, 4, 0, 80, 4);
    let state = market(&pool, 5);
    let cfg = SelectionConfig { mode: Mode::Balanced, ..SelectionConfig::new(3_000) };
    let runs: Vec<_> = [1, 3, 8]
        .into_iter()
        .map(|threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| select(&state, &pool, &cfg).unwrap())
        })
        .collect();
    assert!(runs.windows(2).all(|w| w[0] == w[1]));
}
