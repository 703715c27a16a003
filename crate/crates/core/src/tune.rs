//! Multiplicative-weights tuning of signal weights against dev-set feedback.
//!
//! Each signal's reward is its Spearman correlation with the observed dev
//! utility, rescaled to `[0, 1]`. Weights live on the simplex and follow
//! `w'_m ∝ w_m * exp(eta * r_m)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{MarketError, Weights};
use crate::pool::Pool;
use crate::standardize::{average_ranks, StandardizedTable};

pub const DEFAULT_ETA: f64 = 0.1;
pub const DEFAULT_ROUNDS: usize = 50;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("cannot read feedback file {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("feedback line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidEta(f64),
    #[error("feedback covers {0} pool examples, need at least 3")]
    TooFewCovered(usize),
    #[error("feedback names id {0:?}, which is not in the pool")]
    UnknownId(String),
    #[error("feedback utility for {0:?} is not finite")]
    NonFinite(String),
    #[error("reward vector has {found} entries, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("weight for {0:?} has no column in the table")]
    UnknownSignal(String),
    #[error(transparent)]
    Weights(#[from] MarketError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub eta: f64,
    pub rounds: usize,
    /// Recorded in the output only; the update itself is deterministic.
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            rounds: DEFAULT_ROUNDS,
            seed: 0,
        }
    }
}

/// Observed dev-set utility per example id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DevFeedback {
    pub utilities: BTreeMap<String, f64>,
}

#[derive(Deserialize)]
struct FeedbackLine {
    id: String,
    utility: f64,
}

impl DevFeedback {
    pub fn new(utilities: BTreeMap<String, f64>) -> Result<Self, TuneError> {
        if let Some((id, _)) = utilities.iter().find(|(_, u)| !u.is_finite()) {
            return Err(TuneError::NonFinite(id.clone()));
        }
        Ok(Self { utilities })
    }

    /// Reads JSONL lines of `{"id": ..., "utility": ...}`.
    pub fn load(path: &Path) -> Result<Self, TuneError> {
        let io_err = |source| TuneError::Io {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut utilities = BTreeMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: FeedbackLine = serde_json::from_str(&line).map_err(|e| TuneError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if utilities.insert(parsed.id.clone(), parsed.utility).is_some() {
                return Err(TuneError::Parse {
                    line: i + 1,
                    message: format!("duplicate id {:?}", parsed.id),
                });
            }
        }
        Self::new(utilities)
    }
}

/// One multiplicative-weights step. The input is normalized first, so any
/// nonnegative weights are accepted; the output sums to one.
pub fn eg_update(weights: &Weights, rewards: &[f64], eta: f64) -> Result<Weights, TuneError> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(TuneError::InvalidEta(eta));
    }
    if rewards.len() != weights.len() {
        return Err(TuneError::LengthMismatch {
            expected: weights.len(),
            found: rewards.len(),
        });
    }
    let w = weights.normalized();
    // shifting by the max reward leaves the update unchanged but keeps exp bounded
    let max_r = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = w
        .values()
        .iter()
        .zip(rewards)
        .map(|(wm, r)| wm * (eta * (r - max_r)).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    let entries = w
        .names()
        .into_iter()
        .zip(raw)
        .map(|(n, x)| (n, x / z))
        .collect();
    Ok(Weights::new(entries)?)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Spearman rank correlation (average ranks for ties); 0 if either side is
/// constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Per-signal rewards `(spearman(s_m, utility) + 1) / 2`, in table column
/// order, over the pool examples covered by `feedback`.
pub fn signal_reward(
    table: &StandardizedTable,
    feedback: &DevFeedback,
    pool: &Pool,
) -> Result<Vec<(String, f64)>, TuneError> {
    let mut covered = Vec::with_capacity(feedback.utilities.len());
    for (id, u) in &feedback.utilities {
        let i = pool.index_of(id).ok_or_else(|| TuneError::UnknownId(id.clone()))?;
        covered.push((i, *u));
    }
    if covered.len() < 3 {
        return Err(TuneError::TooFewCovered(covered.len()));
    }
    let utility: Vec<f64> = covered.iter().map(|(_, u)| *u).collect();
    Ok(table
        .columns
        .iter()
        .map(|c| {
            let s: Vec<f64> = covered.iter().map(|(i, _)| c.values[*i]).collect();
            (c.name.clone(), (spearman(&s, &utility) + 1.0) / 2.0)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub weights: Weights,
    pub rewards: BTreeMap<String, f64>,
    /// Weights after each round, starting with the initial weights.
    pub trajectory: Vec<Vec<f64>>,
    pub signals: Vec<String>,
    pub config: TuneConfig,
}

/// Runs `cfg.rounds` multiplicative-weights steps from `initial` (equal
/// weights over the table columns when `None`).
pub fn tune_weights(
    table: &StandardizedTable,
    feedback: &DevFeedback,
    pool: &Pool,
    cfg: &TuneConfig,
    initial: Option<&Weights>,
) -> Result<TuneResult, TuneError> {
    if !(cfg.eta.is_finite() && cfg.eta > 0.0) {
        return Err(TuneError::InvalidEta(cfg.eta));
    }
    let mut weights = match initial {
        Some(w) => {
            if let Some(name) = w.names().into_iter().find(|n| table.get(n).is_none()) {
                return Err(TuneError::UnknownSignal(name));
            }
            w.normalized()
        }
        None => Weights::equal(&table.names())?,
    };
    let rewards: BTreeMap<String, f64> = signal_reward(table, feedback, pool)?.into_iter().collect();
    // table and feedback are fixed, so every round sees the same rewards
    let round_rewards: Vec<f64> = weights.names().iter().map(|n| rewards[n]).collect();
    let mut trajectory = vec![weights.values()];
    for _ in 0..cfg.rounds {
        weights = eg_update(&weights, &round_rewards, cfg.eta)?;
        trajectory.push(weights.values());
    }
    Ok(TuneResult {
        signals: weights.names(),
        weights,
        rewards,
        trajectory,
        config: *cfg,
    })
}
