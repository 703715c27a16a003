//! Flag parsing into configuration layers and pool loading.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use market_select::pipeline::{ConfigLayer, MapOrDirective, PipelineConfig, SignalList};
use market_select::pool::{load_pool, LoadOptions, PoolError};
use market_select::{Error, Pool};
use serde_json::Value;

use crate::cli::PipelineArgs;
use crate::UsageError;

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn read_map(path: &Path) -> Result<BTreeMap<String, f64>> {
    serde_json::from_value(read_json(path)?)
        .with_context(|| format!("{} must be a JSON object of name -> number", path.display()))
}

/// `@file` holds either a plain name -> weight map or `tune` output with a
/// `weights` field.
fn weights_value(spec: &str) -> Result<Value> {
    let Some(path) = spec.strip_prefix('@') else {
        return Ok(Value::String(spec.to_string()));
    };
    let value = read_json(Path::new(path))?;
    match value {
        Value::Object(mut obj) => match obj.remove("weights") {
            Some(w @ Value::Object(_)) => Ok(w),
            Some(_) => Err(UsageError(format!("{path}: \"weights\" must be an object")).into()),
            None => Ok(Value::Object(obj)),
        },
        _ => Err(UsageError(format!("{path}: expected a JSON object")).into()),
    }
}

impl PipelineArgs {
    fn layer(&self) -> Result<ConfigLayer> {
        Ok(ConfigLayer {
            pool: self.pool.clone(),
            preset: self.preset.clone(),
            signals: self.signals.clone().map(SignalList::Joined),
            standardize: self.standardize.clone(),
            tau: self.tau,
            beta: self.beta,
            beta_per_topic: self.beta_per_topic.as_deref().map(read_map).transpose()?,
            alpha: match self.alpha.as_deref() {
                None => None,
                Some("proportional") => Some(MapOrDirective::Directive("proportional".into())),
                Some(path) => Some(MapOrDirective::Map(read_map(Path::new(path))?)),
            },
            weights: self.weights.as_deref().map(weights_value).transpose()?,
            budget_tokens: self.budget_tokens,
            gamma: self.gamma,
            mode: self.mode.clone(),
            label_floor: self
                .label_floor
                .as_deref()
                .map(|s| s.parse().map_err(|e| UsageError(format!("--label-floor: {e}"))))
                .transpose()?,
            retain: self.retain,
            coverage: self.coverage.then_some(true),
            seed: self.seed,
        })
    }

    /// Config file (if any) overlaid with flags, fully resolved, and rounded
    /// to the precision it will be echoed with so that the echo reproduces
    /// the run exactly.
    pub fn resolve(&self, require_budget: bool) -> Result<PipelineConfig> {
        let base = match &self.config {
            Some(path) => ConfigLayer::from_file(path).map_err(Error::from)?,
            None => ConfigLayer::default(),
        };
        let merged = base.merged(self.layer()?);
        let cfg = if require_budget {
            merged.resolve()
        } else {
            merged.resolve_for_pricing()
        }
        .map_err(Error::from)?;
        let echoed = market_select::format::to_rounded_value(&cfg)?;
        Ok(serde_json::from_value(echoed)?)
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            reject_unknown_keys: self.strict_keys,
        }
    }
}

pub fn pool_path(cfg: &PipelineConfig) -> Result<PathBuf> {
    cfg.pool
        .clone()
        .ok_or_else(|| UsageError("no pool given (use --pool or the config key \"pool\")".into()).into())
}

pub fn open_pool(path: &Path, options: &LoadOptions) -> Result<Pool> {
    let pool = match load_pool(path, options) {
        Ok(pool) => pool,
        Err(e @ PoolError::Io { .. }) => return Err(Error::from(e).into()),
        Err(e) => return Err(anyhow::Error::from(Error::from(e)).context(format!("in pool {}", path.display()))),
    };
    log::info!("loaded {} examples in {} topics from {}", pool.len(), pool.topics().len(), path.display());
    Ok(pool)
}
