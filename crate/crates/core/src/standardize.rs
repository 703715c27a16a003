//! Within-topic standardization of raw signals followed by clipping to
//! `[-tau, tau]`.
//!
//! * `zscore`: (x - mean) / population std
//! * `robust`: (x - median) / IQR, quartiles by linear interpolation
//! * `rank+robust`: within-topic average ranks mapped to `[0, 1]`, then robust
//!
//! A zero scale falls back IQR -> std -> all zeros; the scale actually used is
//! recorded per (signal, topic). Singleton topics standardize to 0.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pool::Pool;
use crate::signals::SignalTable;

pub const DEFAULT_TAU: f64 = 2.5;

#[derive(Debug, Error)]
pub enum StandardizeError {
    #[error("column has {found} values, pool has {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("clipping radius must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("unknown standardization method {0:?} (expected zscore, robust or rank+robust)")]
    UnknownMethod(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "zscore")]
    ZScore,
    #[default]
    #[serde(rename = "robust")]
    Robust,
    #[serde(rename = "rank+robust")]
    RankThenRobust,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::ZScore => "zscore",
            Method::Robust => "robust",
            Method::RankThenRobust => "rank+robust",
        })
    }
}

impl FromStr for Method {
    type Err = StandardizeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zscore" => Ok(Method::ZScore),
            "robust" => Ok(Method::Robust),
            "rank+robust" | "rank_then_robust" => Ok(Method::RankThenRobust),
            other => Err(StandardizeError::UnknownMethod(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizeConfig {
    pub method: Method,
    pub tau: f64,
}

impl Default for StandardizeConfig {
    fn default() -> Self {
        Self {
            method: Method::Robust,
            tau: DEFAULT_TAU,
        }
    }
}

impl StandardizeConfig {
    pub fn validate(&self) -> Result<(), StandardizeError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(StandardizeError::InvalidTau(self.tau));
        }
        Ok(())
    }
}

/// Which scale was applied to a (signal, topic) block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSource {
    StdDev,
    Iqr,
    /// Scale fell back from IQR to the standard deviation.
    StdDevFallback,
    /// No spread at all (or a singleton topic); outputs are zero.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicStats {
    pub topic: String,
    pub location: f64,
    pub scale: f64,
    pub source: ScaleSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedColumn {
    pub name: String,
    pub values: Vec<f64>,
    pub stats: Vec<TopicStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedTable {
    pub tau: f64,
    pub columns: Vec<StandardizedColumn>,
}

impl StandardizedTable {
    pub fn get(&self, name: &str) -> Option<&StandardizedColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn degenerate_blocks(&self) -> usize {
        self.columns
            .iter()
            .flat_map(|c| &c.stats)
            .filter(|s| matches!(s.source, ScaleSource::Degenerate | ScaleSource::StdDevFallback))
            .count()
    }
}

pub fn clip(x: f64, tau: f64) -> f64 {
    x.clamp(-tau, tau)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_std(xs: &[f64], mu: f64) -> f64 {
    (xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Linear-interpolation quantile of an ascending slice (inclusive rule:
/// position `q * (n - 1)`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// 1-based average ranks (ties share the mean of their positions).
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn check_len(raw: &[f64], pool: &Pool) -> Result<(), StandardizeError> {
    if raw.len() != pool.len() {
        return Err(StandardizeError::LengthMismatch {
            expected: pool.len(),
            found: raw.len(),
        });
    }
    Ok(())
}

/// Within each topic, `(rank - 1) / (n - 1)` using average ranks; singleton
/// topics map to 0.5.
pub fn rank_normalize(raw: &[f64], pool: &Pool) -> Result<Vec<f64>, StandardizeError> {
    check_len(raw, pool)?;
    let mut out = vec![0.0; raw.len()];
    for topic in pool.topics() {
        let n = topic.members.len();
        if n == 1 {
            out[topic.members[0]] = 0.5;
            continue;
        }
        let values: Vec<f64> = topic.members.iter().map(|&i| raw[i]).collect();
        for (&i, r) in topic.members.iter().zip(average_ranks(&values)) {
            out[i] = (r - 1.0) / (n - 1) as f64;
        }
    }
    Ok(out)
}

fn block_stats(values: &[f64], method: Method) -> (f64, f64, ScaleSource) {
    if values.len() < 2 {
        return (values.first().copied().unwrap_or(0.0), 0.0, ScaleSource::Degenerate);
    }
    match method {
        Method::ZScore => {
            let mu = mean(values);
            let sd = population_std(values, mu);
            if sd > 0.0 {
                (mu, sd, ScaleSource::StdDev)
            } else {
                (mu, 0.0, ScaleSource::Degenerate)
            }
        }
        Method::Robust | Method::RankThenRobust => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            let median = quantile_sorted(&sorted, 0.5);
            let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
            if iqr > 0.0 {
                return (median, iqr, ScaleSource::Iqr);
            }
            let sd = population_std(values, mean(values));
            if sd > 0.0 {
                (median, sd, ScaleSource::StdDevFallback)
            } else {
                (median, 0.0, ScaleSource::Degenerate)
            }
        }
    }
}

/// Standardizes one column per topic and clips it to `[-tau, tau]`.
pub fn standardize_column(
    raw: &[f64],
    pool: &Pool,
    cfg: &StandardizeConfig,
) -> Result<(Vec<f64>, Vec<TopicStats>), StandardizeError> {
    cfg.validate()?;
    check_len(raw, pool)?;
    let input = match cfg.method {
        Method::RankThenRobust => rank_normalize(raw, pool)?,
        _ => raw.to_vec(),
    };
    let mut out = vec![0.0; raw.len()];
    let mut stats = Vec::with_capacity(pool.topics().len());
    for topic in pool.topics() {
        let values: Vec<f64> = topic.members.iter().map(|&i| input[i]).collect();
        let (location, scale, source) = block_stats(&values, cfg.method);
        if source != ScaleSource::Degenerate {
            for (&i, x) in topic.members.iter().zip(&values) {
                out[i] = clip((x - location) / scale, cfg.tau);
            }
        }
        stats.push(TopicStats {
            topic: topic.name.clone(),
            location,
            scale,
            source,
        });
    }
    Ok((out, stats))
}

/// Standardizes every column of `table`; columns are processed in parallel
/// and returned in table order.
pub fn standardize_table(
    table: &SignalTable,
    pool: &Pool,
    cfg: &StandardizeConfig,
) -> Result<StandardizedTable, StandardizeError> {
    let columns = table
        .columns()
        .par_iter()
        .map(|col| {
            let (values, stats) = standardize_column(&col.values, pool, cfg)?;
            Ok(StandardizedColumn {
                name: col.name.clone(),
                values,
                stats,
            })
        })
        .collect::<Result<Vec<_>, StandardizeError>>()?;
    Ok(StandardizedTable {
        tau: cfg.tau,
        columns,
    })
}
