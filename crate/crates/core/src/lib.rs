//! Market-based subset selection for budgeted training.
//!
//! Heterogeneous per-example utility signals are standardized within topics,
//! aggregated into LMSR shares, priced with a (topic-separable) logarithmic
//! market scoring rule and then selected greedily by price-per-token under a
//! token budget.
//!
//! The pipeline is split into small pure stages:
//!
//! - [`pool`]: example records and JSONL ingestion
//! - [`signals`]: kNN rarity, centroid diversity and ingested signals
//! - [`standardize`]: within-topic z-score / robust scaling and clipping
//! - [`market`]: share aggregation and LMSR cost / prices
//! - [`select`]: price-per-token greedy selection and the label-balanced variant
//! - [`tune`]: multiplicative-weights tuning of signal weights
//! - [`verify`]: recovery simulation, corruption and hyperparameter sweeps
//! - [`pipeline`] / [`explain`]: end-to-end wiring used by the CLI

pub mod error;
pub mod explain;
pub mod format;
pub mod market;
pub mod pipeline;
pub mod pool;
pub mod select;
pub mod signals;
pub mod standardize;
pub mod tune;
pub mod verify;

pub use error::{Error, Result};
pub use market::{MarketConfig, MarketState, Weights};
pub use pipeline::{PipelineConfig, PipelineOutcome};
pub use pool::{ExampleRecord, Pool};
pub use select::{SelectionConfig, SelectionReport};
pub use signals::{SignalSpec, SignalTable};
pub use standardize::{StandardizeConfig, StandardizedTable};
