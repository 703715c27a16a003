//! Per-example breakdown of a finished run.
//!
//! A run report embeds its resolved config, so the pipeline is replayed on the
//! same pool and checked against the price dump before anything is reported.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::{PipelineOutcome, PriceRow};
use crate::pool::Pool;
use crate::select::{Decision, Phase};

/// Relative tolerance when comparing replayed values with the 9-digit dump.
pub const DUMP_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignalValue {
    pub name: String,
    pub raw: f64,
    pub standardized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Explanation {
    pub id: String,
    pub topic: String,
    pub label: Option<String>,
    pub tokens: u32,
    /// In signal-table order.
    pub signals: Vec<SignalValue>,
    pub q: f64,
    pub p: f64,
    pub rho: f64,
    /// 1-based position in the descending-`rho` scan.
    pub scan_position: usize,
    pub decision: Decision,
}

/// Compares a replayed outcome with the rows of a price dump. Returns the
/// first id whose share or price disagrees.
pub fn check_dump(pool: &Pool, outcome: &PipelineOutcome, rows: &[PriceRow]) -> std::result::Result<(), String> {
    if rows.len() != pool.len() {
        return Err(format!("price dump has {} rows, pool has {}", rows.len(), pool.len()));
    }
    let close = |a: f64, b: f64| (a - b).abs() <= DUMP_TOLERANCE * a.abs().max(b.abs()).max(1e-300);
    for row in rows {
        let i = pool
            .index_of(&row.id)
            .ok_or_else(|| format!("price dump names {:?}, which is not in the pool", row.id))?;
        let (q, p) = (outcome.market.shares[i], outcome.market.prices[i]);
        if !(close(q, row.q) || (q - row.q).abs() < 1e-12) || !close(p, row.p) {
            return Err(format!(
                "replay disagrees with price dump for {:?}: q {} vs {}, p {} vs {}",
                row.id, q, row.q, p, row.p
            ));
        }
    }
    Ok(())
}

pub fn explain(pool: &Pool, outcome: &PipelineOutcome, id: &str) -> Result<Explanation> {
    let i = pool.index_of(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
    let record = pool.record(i);
    let signals = outcome
        .signals
        .columns()
        .iter()
        .map(|c| SignalValue {
            name: c.name.clone(),
            raw: c.values[i],
            standardized: outcome.standardized.get(&c.name).map_or(f64::NAN, |z| z.values[i]),
        })
        .collect();
    let scan_position = outcome
        .selection
        .ranking
        .iter()
        .position(|&j| j == i)
        .map_or(0, |p| p + 1);
    Ok(Explanation {
        id: record.id.clone(),
        topic: record.topic.clone(),
        label: record.label.clone(),
        tokens: record.token_length,
        signals,
        q: outcome.market.shares[i],
        p: outcome.market.prices[i],
        rho: outcome.selection.rho[i],
        scan_position,
        decision: outcome.selection.decisions[i],
    })
}

impl fmt::Display for Explanation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use crate::format::fmt_f64;
        writeln!(f, "id:        {}", self.id)?;
        writeln!(f, "topic:     {}", self.topic)?;
        if let Some(label) = &self.label {
            writeln!(f, "label:     {label}")?;
        }
        writeln!(f, "tokens:    {}", self.tokens)?;
        writeln!(f, "signals:")?;
        for s in &self.signals {
            writeln!(
                f,
                "  {:<12} raw {:<16} standardized {}",
                s.name,
                fmt_f64(s.raw),
                fmt_f64(s.standardized)
            )?;
        }
        writeln!(f, "share q:   {}", fmt_f64(self.q))?;
        writeln!(f, "price p:   {}", fmt_f64(self.p))?;
        writeln!(f, "rho:       {}", fmt_f64(self.rho))?;
        writeln!(f, "scan rank: {}", self.scan_position)?;
        match self.decision {
            Decision::Admitted {
                phase,
                order,
                tokens_before,
                tokens_after,
            } => {
                let phase = match phase {
                    Phase::Floor => "label floor",
                    Phase::Fill => "budget fill",
                };
                write!(
                    f,
                    "status:    selected (#{order}, {phase}); cumulative tokens {tokens_before} -> {tokens_after}"
                )
            }
            Decision::SkippedForBudget { remaining } => write!(
                f,
                "status:    skipped; needs {} tokens but only {remaining} remained at its scan position",
                self.tokens
            ),
            Decision::NotReached => write!(f, "status:    not selected; the example-count limit was reached first"),
        }
    }
}
