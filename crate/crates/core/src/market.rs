//! LMSR pricing.
//!
//! Shares are a weighted sum of standardized signals. The flat market prices
//! them with `softmax(q / beta)`, the gradient of `beta * logsumexp(q / beta)`.
//! The topic-separable market runs one softmax per topic with its own
//! liquidity `beta_t` and scales it by the topic budget `alpha_t`, so every
//! topic carries exactly `alpha_t` of the price mass.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pool::Pool;
use crate::standardize::StandardizedTable;

pub const DEFAULT_BETA: f64 = 2.0;
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("weight for {0:?} references a signal that is not in the table")]
    UnknownSignal(String),
    #[error("weight {name:?} = {value} must be finite and nonnegative")]
    InvalidWeight { name: String, value: f64 },
    #[error("at least one signal weight must be positive")]
    ZeroWeights,
    #[error("duplicate weight for {0:?}")]
    DuplicateWeight(String),
    #[error("invalid weights {spec:?}: {reason}")]
    InvalidWeightSpec { spec: String, reason: String },
    #[error("liquidity for topic {topic:?} must be positive and finite, got {value}")]
    InvalidBeta { topic: String, value: f64 },
    #[error("topic budget for {topic:?} must be finite and nonnegative, got {value}")]
    InvalidAlpha { topic: String, value: f64 },
    #[error("topic budgets sum to {0}, expected 1")]
    AlphaSum(f64),
    #[error("topic {0:?} is missing from the {1} map")]
    MissingTopic(String, &'static str),
    #[error("{1} map names topic {0:?}, which is not in the pool")]
    UnknownTopic(String, &'static str),
    #[error("share vector has {found} entries, pool has {expected}")]
    LengthMismatch { expected: usize, found: usize },
}

/// Nonnegative signal weights, kept sorted by signal name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct Weights {
    entries: Vec<(String, f64)>,
}

impl Weights {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self, MarketError> {
        let mut seen = std::collections::HashSet::new();
        for (name, w) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(MarketError::DuplicateWeight(name.clone()));
            }
            if !(w.is_finite() && *w >= 0.0) {
                return Err(MarketError::InvalidWeight {
                    name: name.clone(),
                    value: *w,
                });
            }
        }
        if !entries.iter().any(|(_, w)| *w > 0.0) {
            return Err(MarketError::ZeroWeights);
        }
        let mut entries = entries;
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self { entries })
    }

    /// `1/M` for each of the `M` names.
    pub fn equal<S: AsRef<str>>(names: &[S]) -> Result<Self, MarketError> {
        let m = names.len() as f64;
        Self::new(names.iter().map(|n| (n.as_ref().to_string(), 1.0 / m)).collect())
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|(_, w)| *w).collect()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, w)| *w)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same weights rescaled to sum to one.
    pub fn normalized(&self) -> Self {
        let total: f64 = self.entries.iter().map(|(_, w)| w).sum();
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, w)| (n.clone(), w / total))
                .collect(),
        }
    }

    /// Returns a copy with `name` set to `value`.
    pub fn with(&self, name: &str, value: f64) -> Result<Self, MarketError> {
        let mut entries = self.entries.clone();
        match entries.iter_mut().find(|(n, _)| n == name) {
            Some(entry) => entry.1 = value,
            None => entries.push((name.to_string(), value)),
        }
        Self::new(entries)
    }
}

impl TryFrom<BTreeMap<String, f64>> for Weights {
    type Error = MarketError;

    fn try_from(map: BTreeMap<String, f64>) -> Result<Self, Self::Error> {
        Self::new(map.into_iter().collect())
    }
}

impl From<Weights> for BTreeMap<String, f64> {
    fn from(w: Weights) -> Self {
        w.entries.into_iter().collect()
    }
}

impl FromStr for Weights {
    type Err = MarketError;

    /// Parses `name=f,name=f,...`.
    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let mut entries = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part.split_once('=').ok_or_else(|| MarketError::InvalidWeightSpec {
                spec: spec.to_string(),
                reason: format!("{part:?} is not name=value"),
            })?;
            let value = value.trim().parse::<f64>().map_err(|_| MarketError::InvalidWeightSpec {
                spec: spec.to_string(),
                reason: format!("{value:?} is not a number"),
            })?;
            entries.push((name.trim().to_string(), value));
        }
        Self::new(entries)
    }
}

impl fmt::Display for Weights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.entries.iter().map(|(n, w)| format!("{n}={w}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// `q_i = sum_m w_m * s_i^(m)`. Table columns without a weight are ignored.
pub fn aggregate_shares(table: &StandardizedTable, weights: &Weights) -> Result<Vec<f64>, MarketError> {
    for (name, _) in weights.entries() {
        if table.get(name).is_none() {
            return Err(MarketError::UnknownSignal(name.clone()));
        }
    }
    let n = table.columns.first().map_or(0, |c| c.values.len());
    let mut q = vec![0.0; n];
    for column in &table.columns {
        let Some(w) = weights.get(&column.name) else {
            continue;
        };
        for (qi, s) in q.iter_mut().zip(&column.values) {
            *qi += w * s;
        }
    }
    Ok(q)
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `beta * log(sum_j exp(q_j / beta))`, computed with max-subtraction.
/// The empty share vector has cost `-inf`.
///
/// # Panics
/// If `beta` is not positive.
pub fn lmsr_cost(q: &[f64], beta: f64) -> f64 {
    assert!(beta > 0.0, "liquidity must be positive, got {beta}");
    if q.is_empty() {
        return f64::NEG_INFINITY;
    }
    let scaled: Vec<f64> = q.iter().map(|x| x / beta).collect();
    let m = max_of(&scaled);
    let sum: f64 = scaled.iter().map(|x| (x - m).exp()).sum();
    beta * (m + sum.ln())
}

/// `softmax(q / beta)`, computed with max-subtraction.
///
/// # Panics
/// If `beta` is not positive.
pub fn lmsr_prices(q: &[f64], beta: f64) -> Vec<f64> {
    assert!(beta > 0.0, "liquidity must be positive, got {beta}");
    let scaled: Vec<f64> = q.iter().map(|x| x / beta).collect();
    let m = max_of(&scaled);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Liquidity {
    Global(f64),
    PerTopic(BTreeMap<String, f64>),
}

impl Default for Liquidity {
    fn default() -> Self {
        Liquidity::Global(DEFAULT_BETA)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicBudgets {
    /// `alpha_t = |I_t| / N`.
    #[default]
    Proportional,
    Explicit(BTreeMap<String, f64>),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MarketConfig {
    pub beta: Liquidity,
    pub budgets: TopicBudgets,
}

impl MarketConfig {
    pub fn flat(beta: f64) -> Self {
        Self {
            beta: Liquidity::Global(beta),
            budgets: TopicBudgets::Proportional,
        }
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self {
            beta: Liquidity::Global(beta),
            budgets: self.budgets.clone(),
        }
    }

    /// Per-topic `(beta_t, alpha_t)` in pool topic order.
    pub fn resolve(&self, pool: &Pool) -> Result<Vec<TopicParams>, MarketError> {
        let topics = pool.topics();
        let check_known = |map: &BTreeMap<String, f64>, what: &'static str| {
            for name in map.keys() {
                if !topics.iter().any(|t| &t.name == name) {
                    return Err(MarketError::UnknownTopic(name.clone(), what));
                }
            }
            Ok(())
        };
        if let Liquidity::PerTopic(map) = &self.beta {
            check_known(map, "liquidity")?;
        }
        if let TopicBudgets::Explicit(map) = &self.budgets {
            check_known(map, "topic budget")?;
        }

        let n = pool.len() as f64;
        let mut out = Vec::with_capacity(topics.len());
        for topic in topics {
            let beta = match &self.beta {
                Liquidity::Global(b) => *b,
                Liquidity::PerTopic(map) => *map
                    .get(&topic.name)
                    .ok_or_else(|| MarketError::MissingTopic(topic.name.clone(), "liquidity"))?,
            };
            if !(beta.is_finite() && beta > 0.0) {
                return Err(MarketError::InvalidBeta {
                    topic: topic.name.clone(),
                    value: beta,
                });
            }
            let alpha = match &self.budgets {
                TopicBudgets::Proportional => topic.members.len() as f64 / n,
                TopicBudgets::Explicit(map) => *map
                    .get(&topic.name)
                    .ok_or_else(|| MarketError::MissingTopic(topic.name.clone(), "topic budget"))?,
            };
            if !(alpha.is_finite() && alpha >= 0.0) {
                return Err(MarketError::InvalidAlpha {
                    topic: topic.name.clone(),
                    value: alpha,
                });
            }
            out.push(TopicParams {
                topic: topic.name.clone(),
                beta,
                alpha,
            });
        }
        if !out.is_empty() {
            let total: f64 = out.iter().map(|t| t.alpha).sum();
            if (total - 1.0).abs() > SIMPLEX_TOL {
                return Err(MarketError::AlphaSum(total));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicParams {
    pub topic: String,
    pub beta: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicCost {
    pub topic: String,
    pub alpha: f64,
    pub beta: f64,
    /// `alpha_t * beta_t * log(sum_{j in I_t} exp(q_j / beta_t))`
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub shares: Vec<f64>,
    pub prices: Vec<f64>,
    pub cost: f64,
    pub topic_costs: Vec<TopicCost>,
}

fn check_shares(q: &[f64], pool: &Pool) -> Result<(), MarketError> {
    if q.len() != pool.len() {
        return Err(MarketError::LengthMismatch {
            expected: pool.len(),
            found: q.len(),
        });
    }
    Ok(())
}

fn topic_shares(q: &[f64], members: &[usize]) -> Vec<f64> {
    members.iter().map(|&i| q[i]).collect()
}

/// `p_i = alpha_t * softmax_{I_t}(q / beta_t)_i`. Topics are priced in
/// parallel; each topic's softmax is computed in ascending id order.
pub fn topic_prices(q: &[f64], pool: &Pool, cfg: &MarketConfig) -> Result<Vec<f64>, MarketError> {
    check_shares(q, pool)?;
    let params = cfg.resolve(pool)?;
    let blocks: Vec<Vec<f64>> = pool
        .topics()
        .par_iter()
        .zip(params.par_iter())
        .map(|(topic, tp)| {
            lmsr_prices(&topic_shares(q, &topic.members), tp.beta)
                .into_iter()
                .map(|p| tp.alpha * p)
                .collect()
        })
        .collect();
    let mut prices = vec![0.0; q.len()];
    for (topic, block) in pool.topics().iter().zip(blocks) {
        for (&i, p) in topic.members.iter().zip(block) {
            prices[i] = p;
        }
    }
    Ok(prices)
}

/// Per-topic terms of the topic-separable cost, in pool topic order.
pub fn topic_costs(q: &[f64], pool: &Pool, cfg: &MarketConfig) -> Result<Vec<TopicCost>, MarketError> {
    check_shares(q, pool)?;
    let params = cfg.resolve(pool)?;
    Ok(pool
        .topics()
        .iter()
        .zip(params)
        .map(|(topic, tp)| {
            let lse = lmsr_cost(&topic_shares(q, &topic.members), tp.beta);
            TopicCost {
                topic: tp.topic,
                alpha: tp.alpha,
                beta: tp.beta,
                cost: if tp.alpha == 0.0 { 0.0 } else { tp.alpha * lse },
            }
        })
        .collect())
}

/// Topic-separable cost `sum_t alpha_t * beta_t * log(sum_{I_t} exp(q / beta_t))`.
pub fn topic_cost(q: &[f64], pool: &Pool, cfg: &MarketConfig) -> Result<f64, MarketError> {
    Ok(topic_costs(q, pool, cfg)?.iter().map(|t| t.cost).sum())
}

/// Aggregates shares from the standardized table and prices them.
pub fn price_pool(
    pool: &Pool,
    table: &StandardizedTable,
    weights: &Weights,
    cfg: &MarketConfig,
) -> Result<MarketState, MarketError> {
    let shares = aggregate_shares(table, weights)?;
    price_shares(shares, pool, cfg)
}

pub fn price_shares(shares: Vec<f64>, pool: &Pool, cfg: &MarketConfig) -> Result<MarketState, MarketError> {
    let prices = topic_prices(&shares, pool, cfg)?;
    let topic_costs = topic_costs(&shares, pool, cfg)?;
    let cost = topic_costs.iter().map(|t| t.cost).sum();
    Ok(MarketState {
        shares,
        prices,
        cost,
        topic_costs,
    })
}
