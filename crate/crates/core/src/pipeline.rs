//! End-to-end wiring: signals -> standardize -> shares -> prices -> selection.
//!
//! Configuration comes in layers ([`ConfigLayer`], every field optional): a
//! JSON file and command-line flags. Later layers override earlier ones and
//! [`ConfigLayer::resolve`] materializes every default into a
//! [`PipelineConfig`], which is echoed in each run report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Result;
use crate::market::{self, Liquidity, MarketConfig, MarketState, TopicBudgets, TopicCost, Weights, DEFAULT_BETA};
use crate::pool::Pool;
use crate::select::{self, Coverage, LabelFloor, Mode, Selection, SelectionConfig, SelectionReport, DEFAULT_GAMMA};
use crate::signals::{build_signal_table, Provenance, SignalSpec, SignalTable, DIV, DIV_CENT};
use crate::standardize::{standardize_table, Method, StandardizeConfig, StandardizedTable, DEFAULT_TAU};

pub const DEFAULT_SIGNALS: [&str; 3] = ["nll", "rarity:k=10", "div_cent"];
pub const PRESET_MARKET: &str = "market";
pub const PRESET_MARKET_DIVERSE: &str = "market-diverse";
const DIVERSE_GAMMA: f64 = 1.0;
const DIVERSE_WEIGHT_BOOST: f64 = 2.0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("missing required setting {0:?}")]
    Missing(&'static str),
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

fn invalid(field: &'static str, reason: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.to_string(),
    }
}

/// Either `"proportional"` or an explicit topic -> value map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MapOrDirective {
    Directive(String),
    Map(BTreeMap<String, f64>),
}

/// Signals may be given as a JSON list or one comma-separated string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SignalList {
    List(Vec<String>),
    Joined(String),
}

impl SignalList {
    pub fn into_vec(self) -> Vec<String> {
        match self {
            SignalList::List(v) => v,
            SignalList::Joined(s) => split_signal_specs(&s),
        }
    }
}

/// Splits `nll,rarity:k=5,div:alpha_cent=0.3,alpha_knn=0.7` into specs: a
/// comma followed by `key=` continues the previous spec's arguments.
pub fn split_signal_specs(joined: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for part in joined.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let continues = part.contains('=') && !part.contains(':');
        match out.last_mut() {
            Some(prev) if continues && prev.contains(':') => {
                prev.push(',');
                prev.push_str(part);
            }
            _ => out.push(part.to_string()),
        }
    }
    out
}

/// One layer of settings; `None` means "not set here".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub pool: Option<PathBuf>,
    pub preset: Option<String>,
    pub signals: Option<SignalList>,
    pub standardize: Option<String>,
    pub tau: Option<f64>,
    pub beta: Option<f64>,
    pub beta_per_topic: Option<BTreeMap<String, f64>>,
    pub alpha: Option<MapOrDirective>,
    /// `"equal"`, `"name=f,..."` or a name -> weight map.
    pub weights: Option<serde_json::Value>,
    pub budget_tokens: Option<u64>,
    pub gamma: Option<f64>,
    pub mode: Option<String>,
    pub label_floor: Option<LabelFloor>,
    pub retain: Option<f64>,
    pub coverage: Option<bool>,
    pub seed: Option<u64>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($field:ident),*) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field; } )*
    };
}

impl ConfigLayer {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// `top` wins wherever it sets a field.
    pub fn merged(mut self, top: ConfigLayer) -> Self {
        overlay!(
            self, top, pool, preset, signals, standardize, tau, beta, beta_per_topic, alpha, weights,
            budget_tokens, gamma, mode, label_floor, retain, coverage, seed
        );
        self
    }

    pub fn resolve(self) -> Result<PipelineConfig, ConfigError> {
        self.resolve_impl(true)
    }

    /// Like [`resolve`](Self::resolve) but without requiring a budget, for
    /// commands that stop after pricing.
    pub fn resolve_for_pricing(self) -> Result<PipelineConfig, ConfigError> {
        self.resolve_impl(false)
    }

    fn resolve_impl(self, require_budget: bool) -> Result<PipelineConfig, ConfigError> {
        let preset = self.preset.unwrap_or_else(|| PRESET_MARKET.to_string());
        if preset != PRESET_MARKET && preset != PRESET_MARKET_DIVERSE {
            return Err(invalid("preset", format!("unknown preset {preset:?}")));
        }
        let diverse = preset == PRESET_MARKET_DIVERSE;

        let raw_signals = self
            .signals
            .map(SignalList::into_vec)
            .unwrap_or_else(|| DEFAULT_SIGNALS.iter().map(|s| s.to_string()).collect());
        if raw_signals.is_empty() {
            return Err(invalid("signals", "at least one signal is required"));
        }
        let specs: Vec<SignalSpec> = raw_signals
            .iter()
            .map(|s| s.parse::<SignalSpec>().map_err(|e| invalid("signals", e)))
            .collect::<Result<_, _>>()?;
        let names: Vec<String> = specs.iter().map(|s| s.name().to_string()).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(invalid("signals", format!("{n:?} requested twice")));
            }
        }

        let standardize = match self.standardize {
            Some(s) => s.parse::<Method>().map_err(|e| invalid("standardize", e))?,
            None => Method::default(),
        };
        let tau = self.tau.unwrap_or(DEFAULT_TAU);
        StandardizeConfig { method: standardize, tau }
            .validate()
            .map_err(|e| invalid("tau", e))?;

        let beta = self.beta.unwrap_or(DEFAULT_BETA);
        if !(beta.is_finite() && beta > 0.0) {
            return Err(invalid("beta", format!("must be positive, got {beta}")));
        }
        let alpha = match self.alpha {
            None => AlphaSetting::Proportional,
            Some(MapOrDirective::Directive(d)) if d == "proportional" => AlphaSetting::Proportional,
            Some(MapOrDirective::Directive(d)) => {
                return Err(invalid("alpha", format!("expected \"proportional\" or a map, got {d:?}")))
            }
            Some(MapOrDirective::Map(m)) => AlphaSetting::Explicit(m),
        };

        let weights = resolve_weights(self.weights, &names, diverse)?;

        let gamma = self.gamma.unwrap_or(if diverse { DIVERSE_GAMMA } else { DEFAULT_GAMMA });
        let mode = match self.mode {
            Some(m) => m.parse::<Mode>().map_err(|e| invalid("mode", e))?,
            None => Mode::default(),
        };
        if let Some(r) = self.retain {
            if !(r > 0.0 && r <= 1.0) {
                return Err(invalid("retain", format!("fraction must be in (0, 1], got {r}")));
            }
        }
        if require_budget && self.budget_tokens.is_none() && self.retain.is_none() {
            return Err(ConfigError::Missing("budget_tokens"));
        }
        let selection = SelectionConfig {
            budget_tokens: self.budget_tokens.unwrap_or(u64::MAX),
            gamma,
            mode,
            label_floor: self.label_floor.unwrap_or_default(),
            max_examples: None,
        };
        if self.budget_tokens.is_some() {
            selection.validate().map_err(|e| invalid("selection", e))?;
        } else if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(invalid("gamma", format!("must be nonnegative, got {gamma}")));
        }

        Ok(PipelineConfig {
            pool: self.pool,
            preset,
            signals: specs.iter().map(ToString::to_string).collect(),
            standardize,
            tau,
            beta,
            beta_per_topic: self.beta_per_topic,
            alpha,
            weights,
            budget_tokens: self.budget_tokens,
            gamma,
            mode,
            label_floor: selection.label_floor,
            retain: self.retain,
            coverage: self.coverage.unwrap_or(false),
            seed: self.seed.unwrap_or(0),
        })
    }
}

fn resolve_weights(spec: Option<serde_json::Value>, names: &[String], diverse: bool) -> Result<Weights, ConfigError> {
    use serde_json::Value;
    let weights = match spec {
        None => {
            if diverse {
                let raw: Vec<(String, f64)> = names
                    .iter()
                    .map(|n| {
                        let boost = if n == DIV || n == DIV_CENT { DIVERSE_WEIGHT_BOOST } else { 1.0 };
                        (n.clone(), boost)
                    })
                    .collect();
                Weights::new(raw).map_err(|e| invalid("weights", e))?.normalized()
            } else {
                Weights::equal(names).map_err(|e| invalid("weights", e))?
            }
        }
        Some(Value::String(s)) if s == "equal" => Weights::equal(names).map_err(|e| invalid("weights", e))?,
        Some(Value::String(s)) => s.parse::<Weights>().map_err(|e| invalid("weights", e))?,
        Some(v @ Value::Object(_)) => {
            let map: BTreeMap<String, f64> = serde_json::from_value(v).map_err(|e| invalid("weights", e))?;
            Weights::try_from(map).map_err(|e| invalid("weights", e))?
        }
        Some(other) => return Err(invalid("weights", format!("unsupported value {other}"))),
    };
    if let Some(n) = weights.names().into_iter().find(|n| !names.contains(n)) {
        return Err(invalid("weights", format!("{n:?} is not one of the requested signals")));
    }
    Ok(weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSetting {
    #[serde(with = "proportional_tag")]
    Proportional,
    Explicit(BTreeMap<String, f64>),
}

mod proportional_tag {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("proportional")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "proportional" {
            Ok(())
        } else {
            Err(de::Error::custom("expected \"proportional\""))
        }
    }
}

/// Fully resolved run configuration; reproduces a run on the same pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub pool: Option<PathBuf>,
    pub preset: String,
    pub signals: Vec<String>,
    pub standardize: Method,
    pub tau: f64,
    pub beta: f64,
    pub beta_per_topic: Option<BTreeMap<String, f64>>,
    pub alpha: AlphaSetting,
    pub weights: Weights,
    /// `None` only when `retain` alone bounds the selection.
    pub budget_tokens: Option<u64>,
    pub gamma: f64,
    pub mode: Mode,
    pub label_floor: LabelFloor,
    pub retain: Option<f64>,
    pub coverage: bool,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn signal_specs(&self) -> Result<Vec<SignalSpec>, ConfigError> {
        self.signals
            .iter()
            .map(|s| s.parse().map_err(|e| invalid("signals", e)))
            .collect()
    }

    pub fn standardize_config(&self) -> StandardizeConfig {
        StandardizeConfig {
            method: self.standardize,
            tau: self.tau,
        }
    }

    pub fn market_config(&self) -> MarketConfig {
        MarketConfig {
            beta: match &self.beta_per_topic {
                Some(map) => Liquidity::PerTopic(map.clone()),
                None => Liquidity::Global(self.beta),
            },
            budgets: match &self.alpha {
                AlphaSetting::Proportional => TopicBudgets::Proportional,
                AlphaSetting::Explicit(map) => TopicBudgets::Explicit(map.clone()),
            },
        }
    }

    /// Selection settings for a concrete pool (resolves `retain`).
    pub fn selection_config(&self, pool: &Pool) -> SelectionConfig {
        let budget = self.budget_tokens.unwrap_or_else(|| pool.total_tokens().max(1));
        SelectionConfig {
            budget_tokens: budget,
            gamma: self.gamma,
            mode: self.mode,
            label_floor: self.label_floor,
            max_examples: self
                .retain
                .map(|r| ((r * pool.len() as f64).round() as usize).max(1)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub signals: SignalTable,
    pub standardized: StandardizedTable,
    pub market: MarketState,
    pub selection: Selection,
    pub coverage: Option<Coverage>,
}

/// Signals, standardization, pricing and selection on `pool`.
pub fn run(pool: &Pool, cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let specs = cfg.signal_specs()?;
    let signals = build_signal_table(pool, &specs)?;
    let standardized = standardize_table(&signals, pool, &cfg.standardize_config())?;
    let market = market::price_pool(pool, &standardized, &cfg.weights, &cfg.market_config())?;
    let selection = select::select(&market, pool, &cfg.selection_config(pool))?;
    let coverage = if cfg.coverage && !selection.report.selected.is_empty() {
        let idx: Vec<usize> = selection
            .ranking
            .iter()
            .copied()
            .filter(|&i| matches!(selection.decisions[i], select::Decision::Admitted { .. }))
            .collect();
        Some(select::coverage_report(&idx, pool)?)
    } else {
        None
    };
    Ok(PipelineOutcome {
        signals,
        standardized,
        market,
        selection,
        coverage,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalInfo {
    pub name: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n_examples: usize,
    pub n_topics: usize,
    pub pool_tokens: u64,
    pub signals: Vec<SignalInfo>,
    /// (signal, topic) blocks whose scale fell back or was degenerate.
    pub scale_fallbacks: usize,
    pub market_cost: f64,
    pub topic_costs: Vec<TopicCost>,
    pub label_floor: Option<usize>,
    pub max_examples: Option<usize>,
    pub coverage: Option<Coverage>,
}

/// The JSON document written by `select`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub selection: SelectionReport,
    pub diagnostics: Diagnostics,
}

impl RunReport {
    pub fn new(pool: &Pool, cfg: &PipelineConfig, outcome: &PipelineOutcome) -> Self {
        Self {
            config: cfg.clone(),
            selection: outcome.selection.report.clone(),
            diagnostics: Diagnostics {
                n_examples: pool.len(),
                n_topics: pool.topics().len(),
                pool_tokens: pool.total_tokens(),
                signals: outcome
                    .signals
                    .columns()
                    .iter()
                    .map(|c| SignalInfo {
                        name: c.name.clone(),
                        provenance: c.provenance,
                    })
                    .collect(),
                scale_fallbacks: outcome.standardized.degenerate_blocks(),
                market_cost: outcome.market.cost,
                topic_costs: outcome.market.topic_costs.clone(),
                label_floor: outcome.selection.label_floor,
                max_examples: cfg.selection_config(pool).max_examples,
                coverage: outcome.coverage,
            },
        }
    }
}

/// One line of the price dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceRow {
    pub id: String,
    pub topic: String,
    pub q: f64,
    pub p: f64,
}

pub fn price_rows(pool: &Pool, state: &MarketState) -> Vec<PriceRow> {
    pool.records()
        .iter()
        .zip(state.shares.iter().zip(&state.prices))
        .map(|(r, (q, p))| PriceRow {
            id: r.id.clone(),
            topic: r.topic.clone(),
            q: *q,
            p: *p,
        })
        .collect()
}
