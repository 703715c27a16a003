//! Token-budgeted selection.
//!
//! Examples are ranked by `rho_i = p_i / l_i^gamma` (ties by ascending id) and
//! scanned once: every example whose length still fits the remaining budget
//! is admitted, later shorter ones included. The balanced variant first
//! fills a per-label floor from each label's own ranking, then fills the rest
//! of the budget from the global ranking.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::MarketState;
use crate::pool::Pool;

pub const DEFAULT_GAMMA: f64 = 1.6;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("token budget must be at least 1")]
    ZeroBudget,
    #[error("length-bias gamma must be finite and nonnegative, got {0}")]
    InvalidGamma(f64),
    #[error("balanced selection needs a label on every record; {0:?} has none")]
    MissingLabel(String),
    #[error("pool has no labels")]
    NoLabels,
    #[error("selection is empty")]
    EmptySelection,
    #[error("coverage needs embeddings; record {0:?} has none")]
    MissingEmbedding(String),
    #[error("price vector has {found} entries, pool has {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("unknown selection mode {0:?} (expected greedy or balanced)")]
    UnknownMode(String),
    #[error("invalid label floor {0:?} (expected auto or a nonnegative integer)")]
    InvalidFloor(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    #[serde(rename = "greedy", alias = "price_per_token")]
    PricePerToken,
    Balanced,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::PricePerToken => "greedy",
            Mode::Balanced => "balanced",
        })
    }
}

impl FromStr for Mode {
    type Err = SelectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" | "price_per_token" => Ok(Mode::PricePerToken),
            "balanced" => Ok(Mode::Balanced),
            other => Err(SelectError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelFloor {
    /// `ceil(0.5 * K_est / L)` where `K_est` is the greedy selection size.
    #[default]
    Auto,
    Count(usize),
}

impl fmt::Display for LabelFloor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelFloor::Auto => f.write_str("auto"),
            LabelFloor::Count(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for LabelFloor {
    type Err = SelectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(LabelFloor::Auto),
            n => n
                .parse()
                .map(LabelFloor::Count)
                .map_err(|_| SelectError::InvalidFloor(n.to_string())),
        }
    }
}

impl Serialize for LabelFloor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            LabelFloor::Auto => s.serialize_str("auto"),
            LabelFloor::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for LabelFloor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Count(usize),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Count(n) => Ok(LabelFloor::Count(n)),
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub budget_tokens: u64,
    pub gamma: f64,
    pub mode: Mode,
    pub label_floor: LabelFloor,
    /// Optional cardinality stop: at most this many examples are admitted.
    pub max_examples: Option<usize>,
}

impl SelectionConfig {
    pub fn new(budget_tokens: u64) -> Self {
        Self {
            budget_tokens,
            gamma: DEFAULT_GAMMA,
            mode: Mode::PricePerToken,
            label_floor: LabelFloor::Auto,
            max_examples: None,
        }
    }

    pub fn validate(&self) -> Result<(), SelectError> {
        if self.budget_tokens == 0 {
            return Err(SelectError::ZeroBudget);
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(SelectError::InvalidGamma(self.gamma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicAllocation {
    pub count: usize,
    pub tokens: u64,
    pub price_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// Selected ids, by descending `rho` (ties by ascending id).
    pub selected: Vec<String>,
    pub tokens_used: u64,
    pub budget_tokens: u64,
    pub per_topic: BTreeMap<String, TopicAllocation>,
    pub per_label: BTreeMap<String, usize>,
    pub balance_score: Option<f64>,
    /// Examples passed over at least once because they did not fit, and
    /// never admitted.
    pub skipped_for_budget: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Floor,
    Fill,
}

/// What happened to one example during the scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Decision {
    Admitted {
        phase: Phase,
        /// 1-based admission order.
        order: usize,
        tokens_before: u64,
        tokens_after: u64,
    },
    SkippedForBudget {
        remaining: u64,
    },
    /// The scan stopped (cardinality limit) before reaching the example.
    NotReached,
}

/// Full outcome of a selection run, including the per-example scan trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub report: SelectionReport,
    /// Per-label floor actually applied (balanced mode only).
    pub label_floor: Option<usize>,
    /// Indices in descending-`rho` order.
    pub ranking: Vec<usize>,
    pub rho: Vec<f64>,
    pub decisions: Vec<Decision>,
}

/// `rho_i = p_i / l_i^gamma`, with `l^gamma` as `exp(gamma * ln l)`.
pub fn score_rho(prices: &[f64], pool: &Pool, gamma: f64) -> Vec<f64> {
    prices
        .par_iter()
        .zip(pool.records().par_iter())
        .map(|(p, r)| p / (gamma * f64::from(r.token_length).ln()).exp())
        .collect()
}

/// Indices sorted by descending score, ties by ascending index (= id).
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        other => other,
    });
    order
}

struct Scan<'a> {
    pool: &'a Pool,
    budget: u64,
    limit: usize,
    used: u64,
    admitted: usize,
    chosen: Vec<bool>,
    decisions: Vec<Decision>,
}

impl<'a> Scan<'a> {
    fn new(pool: &'a Pool, cfg: &SelectionConfig) -> Self {
        Self {
            pool,
            budget: cfg.budget_tokens,
            limit: cfg.max_examples.unwrap_or(usize::MAX),
            used: 0,
            admitted: 0,
            chosen: vec![false; pool.len()],
            decisions: vec![Decision::NotReached; pool.len()],
        }
    }

    fn full(&self) -> bool {
        self.admitted >= self.limit
    }

    /// Offers example `i`; returns whether it was admitted.
    fn offer(&mut self, i: usize, phase: Phase) -> bool {
        let len = u64::from(self.pool.record(i).token_length);
        if self.used + len <= self.budget {
            self.admitted += 1;
            self.decisions[i] = Decision::Admitted {
                phase,
                order: self.admitted,
                tokens_before: self.used,
                tokens_after: self.used + len,
            };
            self.used += len;
            self.chosen[i] = true;
            true
        } else {
            self.decisions[i] = Decision::SkippedForBudget {
                remaining: self.budget - self.used,
            };
            false
        }
    }
}

fn check_prices(state: &MarketState, pool: &Pool) -> Result<(), SelectError> {
    if state.prices.len() != pool.len() {
        return Err(SelectError::LengthMismatch {
            expected: pool.len(),
            found: state.prices.len(),
        });
    }
    Ok(())
}

fn finish(scan: Scan<'_>, state: &MarketState, ranking: Vec<usize>, rho: Vec<f64>, floor: Option<usize>) -> Selection {
    let pool = scan.pool;
    let selected_idx: Vec<usize> = ranking.iter().copied().filter(|&i| scan.chosen[i]).collect();
    let mut per_topic: BTreeMap<String, TopicAllocation> = pool
        .topics()
        .iter()
        .map(|t| {
            (
                t.name.clone(),
                TopicAllocation {
                    count: 0,
                    tokens: 0,
                    price_mass: 0.0,
                },
            )
        })
        .collect();
    let mut per_label: BTreeMap<String, usize> = BTreeMap::new();
    if let Some(labels) = pool.labels() {
        per_label.extend(labels.into_iter().map(|l| (l, 0)));
    }
    // accumulate in ascending id order so masses do not depend on rank order
    for i in (0..pool.len()).filter(|&i| scan.chosen[i]) {
        let rec = pool.record(i);
        let alloc = per_topic.get_mut(&rec.topic).expect("topic of a pool record");
        alloc.count += 1;
        alloc.tokens += u64::from(rec.token_length);
        alloc.price_mass += state.prices[i];
        if let Some(label) = &rec.label {
            *per_label.entry(label.clone()).or_default() += 1;
        }
    }
    let skipped = scan
        .decisions
        .iter()
        .filter(|d| matches!(d, Decision::SkippedForBudget { .. }))
        .count();
    let selected: Vec<String> = selected_idx.iter().map(|&i| pool.record(i).id.clone()).collect();
    let balance_score = if pool.labels().is_some() && !selected.is_empty() {
        label_balance(&per_label)
    } else {
        None
    };
    Selection {
        report: SelectionReport {
            selected,
            tokens_used: scan.used,
            budget_tokens: scan.budget,
            per_topic,
            per_label,
            balance_score,
            skipped_for_budget: skipped,
        },
        label_floor: floor,
        ranking,
        rho,
        decisions: scan.decisions,
    }
}

pub fn greedy_select(state: &MarketState, pool: &Pool, cfg: &SelectionConfig) -> Result<SelectionReport, SelectError> {
    Ok(greedy_selection(state, pool, cfg)?.report)
}

/// Greedy scan returning the full trace.
pub fn greedy_selection(state: &MarketState, pool: &Pool, cfg: &SelectionConfig) -> Result<Selection, SelectError> {
    cfg.validate()?;
    check_prices(state, pool)?;
    let rho = score_rho(&state.prices, pool, cfg.gamma);
    let ranking = rank_descending(&rho);
    let mut scan = Scan::new(pool, cfg);
    for &i in &ranking {
        if scan.full() {
            break;
        }
        scan.offer(i, Phase::Fill);
    }
    Ok(finish(scan, state, ranking, rho, None))
}

pub fn balanced_select(state: &MarketState, pool: &Pool, cfg: &SelectionConfig) -> Result<SelectionReport, SelectError> {
    Ok(balanced_selection(state, pool, cfg)?.report)
}

/// Label-floor phase followed by a global fill; returns the full trace.
pub fn balanced_selection(state: &MarketState, pool: &Pool, cfg: &SelectionConfig) -> Result<Selection, SelectError> {
    cfg.validate()?;
    check_prices(state, pool)?;
    if let Some(r) = pool.records().iter().find(|r| r.label.is_none()) {
        return Err(SelectError::MissingLabel(r.id.clone()));
    }
    let labels = pool.labels().unwrap_or_default();
    let floor = match cfg.label_floor {
        LabelFloor::Count(n) => n,
        LabelFloor::Auto => {
            let k_est = greedy_selection(state, pool, cfg)?.report.selected.len();
            if labels.is_empty() {
                0
            } else {
                (0.5 * k_est as f64 / labels.len() as f64).ceil() as usize
            }
        }
    };

    let rho = score_rho(&state.prices, pool, cfg.gamma);
    let ranking = rank_descending(&rho);
    let mut scan = Scan::new(pool, cfg);

    if floor > 0 {
        // one pass in rho order, admitting only labels still below the floor
        let mut taken: BTreeMap<&str, usize> = labels.iter().map(|l| (l.as_str(), 0)).collect();
        let mut open = labels.len();
        for &i in &ranking {
            if open == 0 || scan.full() {
                break;
            }
            let label = pool.record(i).label.as_deref().expect("labels checked above");
            let count = taken.get_mut(label).expect("label listed by the pool");
            if *count < floor && scan.offer(i, Phase::Floor) {
                *count += 1;
                if *count == floor {
                    open -= 1;
                }
            }
        }
    }
    for &i in &ranking {
        if scan.full() {
            break;
        }
        if !scan.chosen[i] {
            scan.offer(i, Phase::Fill);
        }
    }
    Ok(finish(scan, state, ranking, rho, Some(floor)))
}

/// Dispatches on `cfg.mode`.
pub fn select(state: &MarketState, pool: &Pool, cfg: &SelectionConfig) -> Result<Selection, SelectError> {
    match cfg.mode {
        Mode::PricePerToken => greedy_selection(state, pool, cfg),
        Mode::Balanced => balanced_selection(state, pool, cfg),
    }
}

fn label_balance(counts: &BTreeMap<String, usize>) -> Option<f64> {
    let total: usize = counts.values().sum();
    if counts.is_empty() || total == 0 {
        return None;
    }
    let uniform = 1.0 / counts.len() as f64;
    Some(
        0.5 * counts
            .values()
            .map(|&c| (c as f64 / total as f64 - uniform).abs())
            .sum::<f64>(),
    )
}

/// Total-variation distance between the selected label distribution and
/// the uniform distribution over the pool's labels; 0 is perfectly balanced.
pub fn balance_score(report: &SelectionReport, pool: &Pool) -> Result<f64, SelectError> {
    let labels = pool.labels().ok_or(SelectError::NoLabels)?;
    if labels.is_empty() {
        return Err(SelectError::NoLabels);
    }
    let mut counts: BTreeMap<String, usize> = labels.into_iter().map(|l| (l, 0)).collect();
    for id in &report.selected {
        let i = pool.index_of(id).ok_or(SelectError::EmptySelection)?;
        if let Some(l) = &pool.record(i).label {
            *counts.entry(l.clone()).or_default() += 1;
        }
    }
    label_balance(&counts).ok_or(SelectError::EmptySelection)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// `tr Cov_S[phi] / tr Cov_D[phi]` (1 when the pool has no spread).
    pub variance_ratio: f64,
    /// `max_{i in D} min_{j in S} ||phi_i - phi_j||`.
    pub covering_radius: f64,
}

fn total_variance(points: &[&[f64]]) -> f64 {
    let n = points.len() as f64;
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(*p) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
        .sum::<f64>()
        / n
}

/// Embedding-space coverage of a selected subset (given as pool indices).
pub fn coverage_report(selected: &[usize], pool: &Pool) -> Result<Coverage, SelectError> {
    if selected.is_empty() {
        return Err(SelectError::EmptySelection);
    }
    let points: Vec<&[f64]> = pool
        .records()
        .iter()
        .map(|r| r.embedding.as_deref().ok_or_else(|| SelectError::MissingEmbedding(r.id.clone())))
        .collect::<Result<_, _>>()?;
    let subset: Vec<&[f64]> = selected.iter().map(|&i| points[i]).collect();
    let var_d = total_variance(&points);
    let var_s = total_variance(&subset);
    let variance_ratio = if var_d > 0.0 { var_s / var_d } else { 1.0 };
    let covering_radius = points
        .par_iter()
        .map(|p| {
            subset
                .iter()
                .map(|s| p.iter().zip(*s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .reduce(|| 0.0, f64::max);
    Ok(Coverage {
        variance_ratio,
        covering_radius,
    })
}
