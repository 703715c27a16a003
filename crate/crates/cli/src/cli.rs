use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "market-select",
    version,
    about = "Price training examples with a logarithmic market and select a token-budgeted subset",
    after_help = "Exit codes: 0 success, 1 invariant violation, 2 I/O or configuration error."
)]
pub struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, env = "MARKET_SELECT_THREADS")]
    pub threads: Option<usize>,

    /// Log progress to standard error (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Full pipeline: signals, standardization, pricing and selection.
    Select {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Directory receiving report.json, prices.jsonl and selected.txt.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compute raw and standardized signals.
    #[command(after_help = "CSV columns: id, topic, tokens, one column per raw signal, then z_<signal> per standardized signal.")]
    Signals {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// CSV output path (standard output when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute shares and prices; writes JSONL of {id, topic, q, p}.
    Price {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// JSONL output path (standard output when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tune signal weights against dev-set feedback with multiplicative weights.
    Tune {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// JSONL of {"id": ..., "utility": ...}.
        #[arg(long)]
        dev_feedback: PathBuf,
        #[arg(long, default_value_t = market_select::tune::DEFAULT_ETA)]
        eta: f64,
        #[arg(long, default_value_t = market_select::tune::DEFAULT_ROUNDS)]
        rounds: usize,
        /// JSON output path, usable later as `--weights @<path>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulation checks of the market's behaviour.
    #[command(subcommand)]
    Simulate(Simulate),
    /// Reprice and reselect over a liquidity x length-bias grid.
    #[command(after_help = "CSV columns: beta, gamma, jaccard (overlap with beta=2, gamma=1.6), count, tokens_used, median_tokens, topic_mass (topic=mass pairs separated by ';').")]
    Sweep {
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,5")]
        beta_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1.4,1.6,1.8")]
        gamma_grid: Vec<f64>,
        /// CSV output path (standard output when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Explain one example of a finished `select` run.
    Explain {
        /// Output directory of the `select` run.
        #[arg(long)]
        run_dir: PathBuf,
        /// Example id.
        #[arg(long)]
        id: String,
        /// Pool file, when it has moved since the run.
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum Simulate {
    /// Monte-Carlo recovery of true utility from noisy monotone signals.
    #[command(after_help = "CSV columns: sigma, k, trials, mean_ratio, std_ratio, epsilon (1 - mean_ratio), min_ratio, scale_min, scale_max (range of the drawn signal slope or steepness).")]
    Recovery {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        sigma_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "10,50,200")]
        k_grid: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Monotone signal family: linear or logistic.
        #[arg(long, default_value = "linear")]
        family: String,
        #[arg(long, default_value_t = market_select::market::DEFAULT_BETA)]
        beta: f64,
        #[arg(long, default_value = "robust")]
        standardize: String,
        #[arg(long, default_value_t = market_select::standardize::DEFAULT_TAU)]
        tau: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Price influence of adversarially corrupting one standardized signal.
    #[command(after_help = "CSV columns: epsilon, beta, price_l1 (||p' - p||_1), share_linf (||q' - q||_inf), share_bound (2 tau eps w), stated_price_bound (2 beta tau eps w).")]
    Corruption {
        #[command(flatten)]
        pipeline: Box<PipelineArgs>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.25,0.5,1")]
        eps_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.5,2,5")]
        beta_grid: Vec<f64>,
        /// Signal to corrupt (defaults to the first configured signal).
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Settings shared by every pool-based command. Each flag overrides the
/// same key in `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    /// JSON config file with the same keys as these flags (snake_case).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pool JSONL file.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Fail on unknown keys in the pool file instead of warning.
    #[arg(long)]
    pub strict_keys: bool,
    /// `market` or `market-diverse`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Comma-separated signal specs, e.g. `nll,rarity:k=10,div_cent`.
    #[arg(long)]
    pub signals: Option<String>,
    /// zscore, robust or rank+robust.
    #[arg(long)]
    pub standardize: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// JSON file mapping topic -> liquidity.
    #[arg(long)]
    pub beta_per_topic: Option<PathBuf>,
    /// `proportional` or a JSON file mapping topic -> budget.
    #[arg(long)]
    pub alpha: Option<String>,
    /// `equal`, `name=w,...` or `@file` (JSON map or `tune` output).
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub budget_tokens: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// greedy or balanced.
    #[arg(long)]
    pub mode: Option<String>,
    /// Per-label floor in balanced mode: an integer or `auto`.
    #[arg(long)]
    pub label_floor: Option<String>,
    /// Stop after this fraction of the pool's examples.
    #[arg(long)]
    pub retain: Option<f64>,
    /// Report variance ratio and covering radius of the selection.
    #[arg(long)]
    pub coverage: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}
