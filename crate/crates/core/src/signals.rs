//! Per-example utility signals.
//!
//! Geometric signals are computed from embeddings within each topic:
//! mean distance to the `k` nearest neighbours ("rarity"), distance to the
//! topic centroid, and a weighted combination of both. Any other signal name
//! is read from the records' ingested signal map.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pool::Pool;

pub const DEFAULT_K: usize = 10;
pub const RARITY: &str = "rarity";
pub const DIV_CENT: &str = "div_cent";
pub const DIV: &str = "div";

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("signal {signal:?} needs embeddings but record {id:?} has none")]
    MissingEmbedding { signal: String, id: String },
    #[error("signal {signal:?} is not present on record {id:?}")]
    MissingIngested { signal: String, id: String },
    #[error("topic {topic:?} has {size} examples, need at least k+1 = {}", k + 1)]
    TopicTooSmall { topic: String, size: usize, k: usize },
    #[error("column length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid signal spec {spec:?}: {reason}")]
    InvalidSpec { spec: String, reason: String },
    #[error("signal {0:?} requested more than once")]
    DuplicateSignal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnParams {
    pub k: usize,
    /// Clamp `k` to `|topic| - 1` for small topics instead of failing.
    pub clamp: bool,
}

impl Default for KnnParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            clamp: true,
        }
    }
}

impl KnnParams {
    pub fn new(k: usize) -> Self {
        Self { k, clamp: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityParams {
    pub alpha_cent: f64,
    pub alpha_knn: f64,
}

impl Default for DiversityParams {
    fn default() -> Self {
        Self {
            alpha_cent: 0.5,
            alpha_knn: 0.5,
        }
    }
}

impl DiversityParams {
    pub fn validate(&self) -> Result<(), String> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.alpha_cent) || !ok(self.alpha_knn) {
            return Err("combination weights must be finite and nonnegative".into());
        }
        if self.alpha_cent + self.alpha_knn <= 0.0 {
            return Err("alpha_cent + alpha_knn must be positive".into());
        }
        Ok(())
    }
}

/// A requested signal column.
#[derive(Debug, Clone, PartialEq)]
pub enum SignalSpec {
    Ingested(String),
    Rarity(KnnParams),
    DivCent,
    Div {
        params: DiversityParams,
        knn: KnnParams,
    },
}

impl SignalSpec {
    /// Column name in the signal table.
    pub fn name(&self) -> &str {
        match self {
            SignalSpec::Ingested(name) => name,
            SignalSpec::Rarity(_) => RARITY,
            SignalSpec::DivCent => DIV_CENT,
            SignalSpec::Div { .. } => DIV,
        }
    }

    pub fn is_geometric(&self) -> bool {
        !matches!(self, SignalSpec::Ingested(_))
    }
}

impl fmt::Display for SignalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalSpec::Ingested(name) => f.write_str(name),
            SignalSpec::Rarity(knn) => write!(f, "rarity:k={}", knn.k),
            SignalSpec::DivCent => f.write_str(DIV_CENT),
            SignalSpec::Div { params, knn } => write!(
                f,
                "div:alpha_cent={},alpha_knn={},k={}",
                params.alpha_cent, params.alpha_knn, knn.k
            ),
        }
    }
}

impl FromStr for SignalSpec {
    type Err = SignalError;

    /// Accepts `nll` (any ingested name), `rarity[:k=<int>]`, `div_cent`
    /// and `div[:alpha_cent=<f>,alpha_knn=<f>[,k=<int>]]`.
    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let invalid = |reason: &str| SignalError::InvalidSpec {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let spec = spec.trim();
        let (head, args) = match spec.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (spec, None),
        };
        if head.is_empty() {
            return Err(invalid("empty signal name"));
        }
        let mut kv = BTreeMap::new();
        if let Some(args) = args {
            for part in args.split(',').filter(|p| !p.trim().is_empty()) {
                let (k, v) = part
                    .split_once('=')
                    .ok_or_else(|| invalid("arguments must be key=value"))?;
                kv.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let take_k = |kv: &mut BTreeMap<String, String>| -> Result<KnnParams, SignalError> {
            match kv.remove("k") {
                None => Ok(KnnParams::default()),
                Some(v) => match v.parse::<usize>() {
                    Ok(k) if k >= 1 => Ok(KnnParams::new(k)),
                    _ => Err(invalid("k must be a positive integer")),
                },
            }
        };
        let take_f = |kv: &mut BTreeMap<String, String>, key: &str, default: f64| {
            match kv.remove(key) {
                None => Ok(default),
                Some(v) => v.parse::<f64>().map_err(|_| invalid("expected a number")),
            }
        };
        let parsed = match head {
            RARITY => SignalSpec::Rarity(take_k(&mut kv)?),
            DIV_CENT => SignalSpec::DivCent,
            DIV => {
                let defaults = DiversityParams::default();
                let params = DiversityParams {
                    alpha_cent: take_f(&mut kv, "alpha_cent", defaults.alpha_cent)?,
                    alpha_knn: take_f(&mut kv, "alpha_knn", defaults.alpha_knn)?,
                };
                params.validate().map_err(|r| invalid(&r))?;
                SignalSpec::Div {
                    params,
                    knn: take_k(&mut kv)?,
                }
            }
            name => {
                if args.is_some() {
                    return Err(invalid("ingested signals take no arguments"));
                }
                SignalSpec::Ingested(name.to_string())
            }
        };
        if let Some(key) = kv.keys().next() {
            return Err(invalid(&format!("unknown argument {key:?}")));
        }
        Ok(parsed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Ingested,
    Computed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalColumn {
    pub name: String,
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

/// Raw signal values, one column per requested signal, in request order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SignalTable {
    columns: Vec<SignalColumn>,
}

impl SignalTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, column: SignalColumn) -> Result<(), SignalError> {
        if let Some(first) = self.columns.first() {
            if first.values.len() != column.values.len() {
                return Err(SignalError::LengthMismatch {
                    left: first.values.len(),
                    right: column.values.len(),
                });
            }
        }
        if self.get(&column.name).is_some() {
            return Err(SignalError::DuplicateSignal(column.name));
        }
        self.columns.push(column);
        Ok(())
    }

    pub fn columns(&self) -> &[SignalColumn] {
        &self.columns
    }

    pub fn get(&self, name: &str) -> Option<&SignalColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

/// Source of nearest-neighbour distances.
pub trait NeighborIndex: Sync {
    /// For every point, its distances to the `k` nearest *other* points,
    /// ascending. Requires `k < points.len()`.
    fn nearest_distances(&self, points: &[&[f64]], k: usize) -> Vec<Vec<f64>>;
}

/// Exhaustive Euclidean search. Parallel over query points; the output does
/// not depend on scheduling.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactIndex;

impl NeighborIndex for ExactIndex {
    fn nearest_distances(&self, points: &[&[f64]], k: usize) -> Vec<Vec<f64>> {
        let n = points.len();
        if k == 0 || n == 0 {
            return vec![Vec::new(); n];
        }
        debug_assert!(k < n);
        let d = points[0].len();
        let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let query = &flat[i * d..(i + 1) * d];
                // k smallest squared distances, kept sorted ascending
                let mut best: Vec<f64> = Vec::with_capacity(k + 1);
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let dist = squared_distance(query, &flat[j * d..(j + 1) * d]);
                    if best.len() == k && dist >= best[k - 1] {
                        continue;
                    }
                    let pos = best.partition_point(|&b| b <= dist);
                    best.insert(pos, dist);
                    best.truncate(k);
                }
                best.into_iter().map(f64::sqrt).collect()
            })
            .collect()
    }
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let (rest_a, rest_b) = (chunks_a.remainder(), chunks_b.remainder());
    for (x, y) in chunks_a.zip(chunks_b) {
        for lane in 0..4 {
            let diff = x[lane] - y[lane];
            acc[lane] += diff * diff;
        }
    }
    let mut tail = 0.0;
    for (x, y) in rest_a.iter().zip(rest_b) {
        let diff = x - y;
        tail += diff * diff;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

fn embeddings<'a>(pool: &'a Pool, signal: &str) -> Result<Vec<&'a [f64]>, SignalError> {
    pool.records()
        .iter()
        .map(|r| {
            r.embedding
                .as_deref()
                .ok_or_else(|| SignalError::MissingEmbedding {
                    signal: signal.to_string(),
                    id: r.id.clone(),
                })
        })
        .collect()
}

pub fn rarity_knn(pool: &Pool, params: KnnParams) -> Result<Vec<f64>, SignalError> {
    rarity_knn_with(pool, params, &ExactIndex)
}

/// Mean distance to the `k` nearest neighbours within the same topic.
///
/// Topics with `k + 1` or fewer members either clamp `k` to `|topic| - 1`
/// (logging a warning; singleton topics get 0) or fail, per `params.clamp`.
pub fn rarity_knn_with(
    pool: &Pool,
    params: KnnParams,
    index: &dyn NeighborIndex,
) -> Result<Vec<f64>, SignalError> {
    if params.k == 0 {
        return Err(SignalError::InvalidSpec {
            spec: format!("rarity:k={}", params.k),
            reason: "k must be positive".into(),
        });
    }
    let points = embeddings(pool, RARITY)?;
    let mut out = vec![0.0; pool.len()];
    for topic in pool.topics() {
        let size = topic.members.len();
        let mut k = params.k;
        if size < k + 1 {
            if !params.clamp {
                return Err(SignalError::TopicTooSmall {
                    topic: topic.name.clone(),
                    size,
                    k,
                });
            }
            k = size.saturating_sub(1);
            log::warn!(
                "topic {:?} has {size} examples; clamping rarity k from {} to {k}",
                topic.name,
                params.k
            );
        }
        if k == 0 {
            continue;
        }
        let members: Vec<&[f64]> = topic.members.iter().map(|&i| points[i]).collect();
        let dists = index.nearest_distances(&members, k);
        for (&i, row) in topic.members.iter().zip(dists) {
            out[i] = row.iter().sum::<f64>() / k as f64;
        }
    }
    Ok(out)
}

/// Distance from each embedding to the mean embedding of its topic.
pub fn diversity_centroid(pool: &Pool) -> Result<Vec<f64>, SignalError> {
    let points = embeddings(pool, DIV_CENT)?;
    let mut out = vec![0.0; pool.len()];
    let Some(d) = pool.embedding_dim() else {
        return Ok(out);
    };
    for topic in pool.topics() {
        let mut centroid = vec![0.0; d];
        for &i in &topic.members {
            for (c, x) in centroid.iter_mut().zip(points[i]) {
                *c += x;
            }
        }
        let n = topic.members.len() as f64;
        centroid.iter_mut().for_each(|c| *c /= n);
        for &i in &topic.members {
            out[i] = euclidean(points[i], &centroid);
        }
    }
    Ok(out)
}

pub fn diversity_combined(
    cent: &[f64],
    rare: &[f64],
    params: DiversityParams,
) -> Result<Vec<f64>, SignalError> {
    if cent.len() != rare.len() {
        return Err(SignalError::LengthMismatch {
            left: cent.len(),
            right: rare.len(),
        });
    }
    Ok(cent
        .iter()
        .zip(rare)
        .map(|(c, r)| params.alpha_cent * c + params.alpha_knn * r)
        .collect())
}

fn ingested(pool: &Pool, name: &str) -> Result<Vec<f64>, SignalError> {
    pool.records()
        .iter()
        .map(|r| {
            r.raw_signals
                .get(name)
                .copied()
                .ok_or_else(|| SignalError::MissingIngested {
                    signal: name.to_string(),
                    id: r.id.clone(),
                })
        })
        .collect()
}

/// Assembles the requested signal columns. Geometric signals require every
/// record to carry an embedding; this is checked here rather than at load.
pub fn build_signal_table(pool: &Pool, requested: &[SignalSpec]) -> Result<SignalTable, SignalError> {
    if let Some(spec) = requested.iter().find(|s| s.is_geometric()) {
        if let Some(r) = pool.records().iter().find(|r| r.embedding.is_none()) {
            return Err(SignalError::MissingEmbedding {
                signal: spec.name().to_string(),
                id: r.id.clone(),
            });
        }
    }

    let mut rarity_cache: BTreeMap<(usize, bool), Vec<f64>> = BTreeMap::new();
    let mut rarity = |knn: KnnParams| -> Result<Vec<f64>, SignalError> {
        if let Some(col) = rarity_cache.get(&(knn.k, knn.clamp)) {
            return Ok(col.clone());
        }
        let col = rarity_knn(pool, knn)?;
        rarity_cache.insert((knn.k, knn.clamp), col.clone());
        Ok(col)
    };
    let mut centroid_cache: Option<Vec<f64>> = None;
    let mut centroid = || -> Result<Vec<f64>, SignalError> {
        if centroid_cache.is_none() {
            centroid_cache = Some(diversity_centroid(pool)?);
        }
        Ok(centroid_cache.clone().unwrap_or_default())
    };

    let mut table = SignalTable::new();
    for spec in requested {
        let (values, provenance) = match spec {
            SignalSpec::Ingested(name) => (ingested(pool, name)?, Provenance::Ingested),
            SignalSpec::Rarity(knn) => (rarity(*knn)?, Provenance::Computed),
            SignalSpec::DivCent => (centroid()?, Provenance::Computed),
            SignalSpec::Div { params, knn } => {
                params.validate().map_err(|reason| SignalError::InvalidSpec {
                    spec: spec.to_string(),
                    reason,
                })?;
                let cent = centroid()?;
                let rare = rarity(*knn)?;
                (diversity_combined(&cent, &rare, *params)?, Provenance::Computed)
            }
        };
        table.push(SignalColumn {
            name: spec.name().to_string(),
            values,
            provenance,
        })?;
    }
    Ok(table)
}
