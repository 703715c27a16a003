//! Executable checks of the market's theoretical behaviour: utility recovery
//! from noisy monotone signals, price influence of a corrupted signal, and
//! selection stability across liquidity / length-bias grids.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{self, aggregate_shares, lmsr_prices, MarketConfig, MarketError, Weights};
use crate::pool::{ExampleRecord, Pool};
use crate::select::{self, rank_descending, SelectError, SelectionConfig};
use crate::standardize::{standardize_column, StandardizeConfig, StandardizeError, StandardizedColumn, StandardizedTable};

/// Reference point for hyperparameter sweeps.
pub const REFERENCE_BETA: f64 = 2.0;
pub const REFERENCE_GAMMA: f64 = 1.6;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("signal {0:?} is not in the standardized table")]
    UnknownSignal(String),
    #[error("signal {name:?} has |value| {value} > tau = {tau}; clip before sweeping")]
    Unclipped { name: String, value: f64, tau: f64 },
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Standardize(#[from] StandardizeError),
}

/// `F(p) = sum_i p_i q_i / beta + H(p)`; `softmax(q / beta)` is its maximizer
/// over the simplex.
pub fn gibbs_objective(p: &[f64], q: &[f64], beta: f64) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let entropy = if pi > 0.0 { -pi * pi.ln() } else { 0.0 };
            pi * qi / beta + entropy
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonotoneFamily {
    /// `f(u) = a u + b`, `a ~ U[0.5, 1.5]`, `b ~ N(0, 1)`.
    #[default]
    Linear,
    /// `f(u) = 1 / (1 + exp(-s (u - c)))`, `s ~ U[1, 4]`, `c ~ U[0.25, 0.75]`.
    Logistic,
}

impl MonotoneFamily {
    /// Range of the drawn scale parameter (linear slope or logistic
    /// steepness), the knob that sets each signal's strength.
    pub fn scale_range(self) -> (f64, f64) {
        match self {
            MonotoneFamily::Linear => (0.5, 1.5),
            MonotoneFamily::Logistic => (1.0, 4.0),
        }
    }
}

impl std::str::FromStr for MonotoneFamily {
    type Err = VerifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(MonotoneFamily::Linear),
            "logistic" => Ok(MonotoneFamily::Logistic),
            other => Err(VerifyError::InvalidConfig(format!("unknown monotone family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySimConfig {
    pub n: usize,
    pub m: usize,
    pub sigmas: Vec<f64>,
    pub ks: Vec<usize>,
    pub family: MonotoneFamily,
    pub trials: usize,
    pub seed: u64,
    pub beta: f64,
    pub standardize: StandardizeConfig,
}

impl Default for RecoverySimConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            m: 3,
            sigmas: vec![0.5],
            ks: vec![10, 50, 200],
            family: MonotoneFamily::Linear,
            trials: 50,
            seed: 0,
            beta: REFERENCE_BETA,
            standardize: StandardizeConfig::default(),
        }
    }
}

impl RecoverySimConfig {
    pub fn validate(&self) -> Result<(), VerifyError> {
        let bad = |msg: &str| Err(VerifyError::InvalidConfig(msg.to_string()));
        if self.n == 0 || self.m == 0 || self.trials == 0 {
            return bad("n, m and trials must be at least 1");
        }
        if self.sigmas.is_empty() || self.ks.is_empty() {
            return bad("sigma and K grids must be nonempty");
        }
        if self.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("sigma must be finite and nonnegative");
        }
        if self.ks.iter().any(|&k| k == 0 || k > self.n) {
            return bad("every K must satisfy 1 <= K <= n");
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return bad("beta must be positive");
        }
        self.standardize.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryPoint {
    pub sigma: f64,
    pub k: usize,
    pub trials: usize,
    pub mean_ratio: f64,
    pub std_ratio: f64,
    /// `1 - mean_ratio`.
    pub epsilon: f64,
    pub min_ratio: f64,
}

/// One trial's data: true utilities and noise-free signal transforms plus
/// standard-normal noise, shared across the sigma grid.
struct TrialDraw {
    utilities: Vec<f64>,
    clean: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn draw_trial(cfg: &RecoverySimConfig, trial: usize) -> TrialDraw {
    let mut rng = trial_rng(cfg.seed, trial);
    let utilities: Vec<f64> = (0..cfg.n).map(|_| rng.random::<f64>()).collect();
    let mut clean = Vec::with_capacity(cfg.m);
    let mut noise = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.m {
        let column = match cfg.family {
            MonotoneFamily::Linear => {
                let (lo, hi) = cfg.family.scale_range();
                let a = rng.random_range(lo..hi);
                let b: f64 = StandardNormal.sample(&mut rng);
                utilities.iter().map(|u| a * u + b).collect()
            }
            MonotoneFamily::Logistic => {
                let (lo, hi) = cfg.family.scale_range();
                let s = rng.random_range(lo..hi);
                let c = rng.random_range(0.25..0.75);
                utilities.iter().map(|u| 1.0 / (1.0 + (-s * (u - c)).exp())).collect()
            }
        };
        clean.push(column);
        noise.push((0..cfg.n).map(|_| StandardNormal.sample(&mut rng)).collect());
    }
    TrialDraw {
        utilities,
        clean,
        noise,
    }
}

fn synthetic_pool(n: usize) -> Pool {
    let recs = (0..n).map(|i| ExampleRecord::new(format!("u{i:08}"), "sim", 1)).collect();
    Pool::from_records(recs).expect("synthetic ids are unique")
}

/// Sum over `indices` in ascending index order.
fn sum_at(values: &[f64], indices: &[usize]) -> f64 {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.iter().map(|&i| values[i]).sum()
}

/// Runs one trial and returns `(sigma, K, ratio)` for every grid point.
pub fn recovery_trial(cfg: &RecoverySimConfig, trial: usize) -> Result<Vec<(f64, usize, f64)>, VerifyError> {
    cfg.validate()?;
    let pool = synthetic_pool(cfg.n);
    recovery_trial_on(cfg, trial, &pool)
}

fn recovery_trial_on(cfg: &RecoverySimConfig, trial: usize, pool: &Pool) -> Result<Vec<(f64, usize, f64)>, VerifyError> {
    let draw = draw_trial(cfg, trial);
    let truth = rank_descending(&draw.utilities);
    let names: Vec<String> = (0..cfg.m).map(|j| format!("s{j}")).collect();
    let weights = Weights::equal(&names)?;
    let mut out = Vec::with_capacity(cfg.sigmas.len() * cfg.ks.len());
    for &sigma in &cfg.sigmas {
        let mut columns = Vec::with_capacity(cfg.m);
        for (j, name) in names.iter().enumerate() {
            let raw: Vec<f64> = draw.clean[j]
                .iter()
                .zip(&draw.noise[j])
                .map(|(f, z)| f + sigma * z)
                .collect();
            let (values, stats) = standardize_column(&raw, pool, &cfg.standardize)?;
            columns.push(StandardizedColumn {
                name: name.clone(),
                values,
                stats,
            });
        }
        let table = StandardizedTable {
            tau: cfg.standardize.tau,
            columns,
        };
        let shares = aggregate_shares(&table, &weights)?;
        let prices = lmsr_prices(&shares, cfg.beta);
        let ranked = rank_descending(&prices);
        for &k in &cfg.ks {
            let selected = sum_at(&draw.utilities, &ranked[..k]);
            let best = sum_at(&draw.utilities, &truth[..k]);
            let ratio = if best > 0.0 { selected / best } else { 1.0 };
            out.push((sigma, k, ratio));
        }
    }
    Ok(out)
}

/// Monte-Carlo utility recovery over the `(sigma, K)` grid. Trials run in
/// parallel with per-trial generators derived from `(seed, trial)`.
pub fn simulate_recovery(cfg: &RecoverySimConfig) -> Result<Vec<RecoveryPoint>, VerifyError> {
    cfg.validate()?;
    let pool = synthetic_pool(cfg.n);
    let per_trial: Vec<Vec<(f64, usize, f64)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| recovery_trial_on(cfg, t, &pool))
        .collect::<Result<_, _>>()?;
    let points = cfg.sigmas.len() * cfg.ks.len();
    let mut out = Vec::with_capacity(points);
    for g in 0..points {
        let (sigma, k, _) = per_trial[0][g];
        let ratios: Vec<f64> = per_trial.iter().map(|t| t[g].2).collect();
        let n = ratios.len() as f64;
        let mean = ratios.iter().sum::<f64>() / n;
        let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        out.push(RecoveryPoint {
            sigma,
            k,
            trials: cfg.trials,
            mean_ratio: mean,
            std_ratio: var.sqrt(),
            epsilon: 1.0 - mean,
            min_ratio: ratios.iter().copied().fold(f64::INFINITY, f64::min),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSweepConfig {
    pub epsilons: Vec<f64>,
    pub target_signal: String,
    pub tau: f64,
    pub betas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluencePoint {
    pub epsilon: f64,
    pub beta: f64,
    /// `||p' - p||_1`
    pub price_l1: f64,
    /// `||q' - q||_inf`
    pub share_linf: f64,
    /// `2 tau eps w_target`
    pub share_bound: f64,
    /// `2 beta tau eps w_target`, recorded for comparison only.
    pub stated_price_bound: f64,
}

/// Adversarial corruption `(1 - eps) z + eps eta` with `eta = -tau sign(z)`
/// of one standardized column, repriced at every `(eps, beta)`.
pub fn sweep_corruption(
    pool: &Pool,
    table: &StandardizedTable,
    weights: &Weights,
    market_cfg: &MarketConfig,
    cfg: &CorruptionSweepConfig,
) -> Result<Vec<InfluencePoint>, VerifyError> {
    if cfg.epsilons.is_empty() || cfg.betas.is_empty() {
        return Err(VerifyError::EmptyGrid);
    }
    if let Some(e) = cfg.epsilons.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(VerifyError::InvalidConfig(format!("epsilon {e} outside [0, 1]")));
    }
    if !(cfg.tau.is_finite() && cfg.tau > 0.0) {
        return Err(VerifyError::InvalidConfig(format!("tau must be positive, got {}", cfg.tau)));
    }
    let target = table
        .get(&cfg.target_signal)
        .ok_or_else(|| VerifyError::UnknownSignal(cfg.target_signal.clone()))?;
    if let Some(v) = target.values.iter().find(|v| v.abs() > cfg.tau) {
        return Err(VerifyError::Unclipped {
            name: target.name.clone(),
            value: v.abs(),
            tau: cfg.tau,
        });
    }
    let w_target = weights.get(&cfg.target_signal).unwrap_or(0.0);
    let shares = aggregate_shares(table, weights)?;

    let mut out = Vec::with_capacity(cfg.epsilons.len() * cfg.betas.len());
    for &beta in &cfg.betas {
        let mcfg = market_cfg.with_beta(beta);
        let base = market::topic_prices(&shares, pool, &mcfg)?;
        for &eps in &cfg.epsilons {
            let mut corrupted = table.clone();
            let col = corrupted
                .columns
                .iter_mut()
                .find(|c| c.name == cfg.target_signal)
                .expect("target column checked above");
            for z in col.values.iter_mut() {
                let eta = -cfg.tau * sign(*z);
                *z = (1.0 - eps) * *z + eps * eta;
            }
            let shifted = aggregate_shares(&corrupted, weights)?;
            let prices = market::topic_prices(&shifted, pool, &mcfg)?;
            out.push(InfluencePoint {
                epsilon: eps,
                beta,
                price_l1: prices.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum(),
                share_linf: shifted
                    .iter()
                    .zip(&shares)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
                share_bound: 2.0 * cfg.tau * eps * w_target,
                stated_price_bound: 2.0 * beta * cfg.tau * eps * w_target,
            });
        }
    }
    Ok(out)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta: f64,
    pub gamma: f64,
    /// Jaccard overlap with the selection at the reference point.
    pub jaccard: f64,
    pub count: usize,
    pub tokens_used: u64,
    pub median_tokens: f64,
    /// Price mass of the selected examples per topic.
    pub topic_mass: BTreeMap<String, f64>,
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

fn median_u32(mut xs: Vec<u32>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        f64::from(xs[n / 2])
    } else {
        (f64::from(xs[n / 2 - 1]) + f64::from(xs[n / 2])) / 2.0
    }
}

fn run_point(
    pool: &Pool,
    shares: &[f64],
    market_cfg: &MarketConfig,
    selection: &SelectionConfig,
    beta: f64,
    gamma: f64,
) -> Result<(select::Selection, Vec<f64>), VerifyError> {
    let state = market::price_shares(shares.to_vec(), pool, &market_cfg.with_beta(beta))?;
    let cfg = SelectionConfig {
        gamma,
        ..selection.clone()
    };
    let sel = select::select(&state, pool, &cfg)?;
    Ok((sel, state.prices))
}

/// Reprices and reselects at every `(beta, gamma)` grid point and compares
/// against the reference `(2.0, 1.6)` selection.
pub fn sweep_hyperparams(
    pool: &Pool,
    table: &StandardizedTable,
    weights: &Weights,
    market_cfg: &MarketConfig,
    selection: &SelectionConfig,
    betas: &[f64],
    gammas: &[f64],
) -> Result<Vec<SweepPoint>, VerifyError> {
    if betas.is_empty() || gammas.is_empty() {
        return Err(VerifyError::EmptyGrid);
    }
    let shares = aggregate_shares(table, weights)?;
    let (reference, _) = run_point(pool, &shares, market_cfg, selection, REFERENCE_BETA, REFERENCE_GAMMA)?;
    let reference: BTreeSet<String> = reference.report.selected.into_iter().collect();

    let grid: Vec<(f64, f64)> = betas
        .iter()
        .flat_map(|&b| gammas.iter().map(move |&g| (b, g)))
        .collect();
    grid.par_iter()
        .map(|&(beta, gamma)| {
            let (sel, prices) = run_point(pool, &shares, market_cfg, selection, beta, gamma)?;
            let chosen: BTreeSet<String> = sel.report.selected.iter().cloned().collect();
            let mut topic_mass: BTreeMap<String, f64> =
                pool.topics().iter().map(|t| (t.name.clone(), 0.0)).collect();
            let mut lengths = Vec::with_capacity(chosen.len());
            for (rec, price) in pool.records().iter().zip(&prices) {
                if chosen.contains(&rec.id) {
                    *topic_mass.get_mut(&rec.topic).expect("pool topic") += price;
                    lengths.push(rec.token_length);
                }
            }
            Ok(SweepPoint {
                beta,
                gamma,
                jaccard: jaccard(&chosen, &reference),
                count: chosen.len(),
                tokens_used: sel.report.tokens_used,
                median_tokens: median_u32(lengths),
                topic_mass,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_linear_recovers_exactly() {
        let cfg = RecoverySimConfig {
            n: 300,
            sigmas: vec![0.0],
            ks: vec![1, 10, 100, 300],
            trials: 5,
            ..Default::default()
        };
        for p in simulate_recovery(&cfg).unwrap() {
            assert_eq!(p.mean_ratio, 1.0, "K={}", p.k);
            assert_eq!(p.min_ratio, 1.0);
        }
    }

    #[test]
    fn noiseless_logistic_recovers_exactly() {
        let cfg = RecoverySimConfig {
            n: 300,
            sigmas: vec![0.0],
            ks: vec![5, 50],
            trials: 5,
            family: MonotoneFamily::Logistic,
            ..Default::default()
        };
        for p in simulate_recovery(&cfg).unwrap() {
            assert_eq!(p.mean_ratio, 1.0);
        }
    }

    #[test]
    fn seeded_trials_are_reproducible() {
        let cfg = RecoverySimConfig {
            n: 200,
            sigmas: vec![0.3, 1.0],
            ks: vec![5, 20],
            trials: 4,
            seed: 17,
            ..Default::default()
        };
        assert_eq!(simulate_recovery(&cfg).unwrap(), simulate_recovery(&cfg).unwrap());
        assert_eq!(recovery_trial(&cfg, 2).unwrap(), recovery_trial(&cfg, 2).unwrap());
        assert_ne!(recovery_trial(&cfg, 2).unwrap(), recovery_trial(&cfg, 3).unwrap());
    }

    #[test]
    fn ratio_bounded() {
        let cfg = RecoverySimConfig {
            n: 200,
            sigmas: vec![0.0, 0.5, 5.0],
            ks: vec![1, 7, 200],
            trials: 6,
            ..Default::default()
        };
        for p in simulate_recovery(&cfg).unwrap() {
            assert!(p.min_ratio >= 0.0 && p.mean_ratio <= 1.0 + 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        let bad = RecoverySimConfig {
            ks: vec![0],
            ..Default::default()
        };
        assert!(simulate_recovery(&bad).is_err());
        let bad = RecoverySimConfig {
            sigmas: vec![-1.0],
            ..Default::default()
        };
        assert!(simulate_recovery(&bad).is_err());
    }

    #[test]
    fn gibbs_objective_at_uniform() {
        // uniform p with zero shares: F = H = ln N
        let f = gibbs_objective(&[0.25; 4], &[0.0; 4], 1.0);
        assert!((f - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn jaccard_and_median() {
        let a: BTreeSet<String> = ["x", "y"].map(String::from).into();
        let b: BTreeSet<String> = ["y", "z"].map(String::from).into();
        assert!((jaccard(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&BTreeSet::new(), &BTreeSet::new()), 1.0);
        assert_eq!(median_u32(vec![5, 1, 3]), 3.0);
        assert_eq!(median_u32(vec![4, 1, 3, 2]), 2.5);
    }
}
