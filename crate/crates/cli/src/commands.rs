use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use market_select::explain::{check_dump, explain};
use market_select::format::{fmt_f64, to_rounded_line, to_rounded_pretty};
use market_select::pipeline::{self, price_rows, PriceRow, RunReport};
use market_select::signals::build_signal_table;
use market_select::standardize::standardize_table;
use market_select::tune::{tune_weights, DevFeedback, TuneConfig};
use market_select::verify::{
    simulate_recovery, sweep_corruption, sweep_hyperparams, CorruptionSweepConfig, MonotoneFamily, RecoverySimConfig,
};
use market_select::{market, Error, StandardizeConfig};
use serde::Serialize;

use crate::cli::{PipelineArgs, Simulate};
use crate::config::{open_pool, pool_path};
use crate::output::{csv_bytes, emit, Staged};
use crate::{InvariantError, UsageError};

pub const REPORT_FILE: &str = "report.json";
pub const PRICES_FILE: &str = "prices.jsonl";
pub const SELECTED_FILE: &str = "selected.txt";

fn jsonl<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for row in rows {
        out.extend_from_slice(to_rounded_line(row)?.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

pub fn select(args: &PipelineArgs, out_dir: &Path) -> Result<()> {
    let cfg = args.resolve(true)?;
    let pool = open_pool(&pool_path(&cfg)?, &args.load_options())?;
    let outcome = pipeline::run(&pool, &cfg)?;
    let report = RunReport::new(&pool, &cfg, &outcome);

    std::fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let mut report_text = to_rounded_pretty(&report)?;
    report_text.push('\n');
    let mut selected = String::new();
    for id in &report.selection.selected {
        selected.push_str(id);
        selected.push('\n');
    }
    let mut staged = Staged::new();
    staged.add(&out_dir.join(REPORT_FILE), report_text.as_bytes())?;
    staged.add(&out_dir.join(PRICES_FILE), &jsonl(&price_rows(&pool, &outcome.market))?)?;
    staged.add(&out_dir.join(SELECTED_FILE), selected.as_bytes())?;
    staged.commit()?;

    let sel = &report.selection;
    println!(
        "selected {} of {} examples, {} / {} tokens",
        sel.selected.len(),
        pool.len(),
        sel.tokens_used,
        sel.budget_tokens
    );
    if let Some(score) = sel.balance_score {
        println!("balance score {}", fmt_f64(score));
    }
    Ok(())
}

pub fn signals(args: &PipelineArgs, out: Option<&Path>) -> Result<()> {
    let cfg = args.resolve(false)?;
    let pool = open_pool(&pool_path(&cfg)?, &args.load_options())?;
    let raw = build_signal_table(&pool, &cfg.signal_specs().map_err(Error::from)?).map_err(Error::from)?;
    let z = standardize_table(&raw, &pool, &cfg.standardize_config()).map_err(Error::from)?;

    let mut header = vec!["id".to_string(), "topic".to_string(), "tokens".to_string()];
    header.extend(raw.names());
    header.extend(z.names().into_iter().map(|n| format!("z_{n}")));
    let rows = pool.records().iter().enumerate().map(|(i, r)| {
        let mut row = vec![r.id.clone(), r.topic.clone(), r.token_length.to_string()];
        row.extend(raw.columns().iter().map(|c| fmt_f64(c.values[i])));
        row.extend(z.columns.iter().map(|c| fmt_f64(c.values[i])));
        row
    });
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    emit(out, &csv_bytes(&header, rows)?)
}

pub fn price(args: &PipelineArgs, out: Option<&Path>) -> Result<()> {
    let cfg = args.resolve(false)?;
    let pool = open_pool(&pool_path(&cfg)?, &args.load_options())?;
    let raw = build_signal_table(&pool, &cfg.signal_specs().map_err(Error::from)?).map_err(Error::from)?;
    let z = standardize_table(&raw, &pool, &cfg.standardize_config()).map_err(Error::from)?;
    let state = market::price_pool(&pool, &z, &cfg.weights, &cfg.market_config()).map_err(Error::from)?;
    emit(out, &jsonl(&price_rows(&pool, &state))?)
}

#[derive(Serialize)]
struct TuneOutput {
    weights: market_select::Weights,
    rewards: std::collections::BTreeMap<String, f64>,
    signals: Vec<String>,
    trajectory: Vec<Vec<f64>>,
    eta: f64,
    rounds: usize,
    seed: u64,
}

pub fn tune(args: &PipelineArgs, feedback: &Path, eta: f64, rounds: usize, out: Option<&Path>) -> Result<()> {
    let cfg = args.resolve(false)?;
    let pool = open_pool(&pool_path(&cfg)?, &args.load_options())?;
    let raw = build_signal_table(&pool, &cfg.signal_specs().map_err(Error::from)?).map_err(Error::from)?;
    let z = standardize_table(&raw, &pool, &cfg.standardize_config()).map_err(Error::from)?;
    let feedback = DevFeedback::load(feedback).map_err(Error::from)?;
    let tune_cfg = TuneConfig {
        eta,
        rounds,
        seed: cfg.seed,
    };
    let result = tune_weights(&z, &feedback, &pool, &tune_cfg, Some(&cfg.weights)).map_err(Error::from)?;
    let output = TuneOutput {
        weights: result.weights,
        rewards: result.rewards,
        signals: result.signals,
        trajectory: result.trajectory,
        eta,
        rounds,
        seed: cfg.seed,
    };
    let mut text = to_rounded_pretty(&output)?;
    text.push('\n');
    emit(out, text.as_bytes())
}

pub fn simulate(cmd: &Simulate) -> Result<()> {
    match cmd {
        Simulate::Recovery {
            n,
            m,
            sigma_grid,
            k_grid,
            trials,
            seed,
            family,
            beta,
            standardize,
            tau,
            out,
        } => {
            let family: MonotoneFamily = family.parse().map_err(|e| UsageError(format!("--family: {e}")))?;
            let cfg = RecoverySimConfig {
                n: *n,
                m: *m,
                sigmas: sigma_grid.clone(),
                ks: k_grid.clone(),
                family,
                trials: *trials,
                seed: *seed,
                beta: *beta,
                standardize: StandardizeConfig {
                    method: standardize.parse().map_err(|e| UsageError(format!("--standardize: {e}")))?,
                    tau: *tau,
                },
            };
            cfg.validate().map_err(|e| UsageError(e.to_string()))?;
            let points = simulate_recovery(&cfg)?;
            let (lo, hi) = family.scale_range();
            let rows = points.iter().map(|p| {
                vec![
                    fmt_f64(p.sigma),
                    p.k.to_string(),
                    p.trials.to_string(),
                    fmt_f64(p.mean_ratio),
                    fmt_f64(p.std_ratio),
                    fmt_f64(p.epsilon),
                    fmt_f64(p.min_ratio),
                    fmt_f64(lo),
                    fmt_f64(hi),
                ]
            });
            let header = [
                "sigma",
                "k",
                "trials",
                "mean_ratio",
                "std_ratio",
                "epsilon",
                "min_ratio",
                "scale_min",
                "scale_max",
            ];
            emit(out.as_deref(), &csv_bytes(&header, rows)?)
        }
        Simulate::Corruption {
            pipeline: args,
            eps_grid,
            beta_grid,
            target,
            out,
        } => {
            let cfg = args.resolve(false)?;
            let pool = open_pool(&pool_path(&cfg)?, &args.load_options())?;
            let raw = build_signal_table(&pool, &cfg.signal_specs().map_err(Error::from)?).map_err(Error::from)?;
            let z = standardize_table(&raw, &pool, &cfg.standardize_config()).map_err(Error::from)?;
            let target = match target {
                Some(t) => t.clone(),
                None => z.names().into_iter().next().ok_or_else(|| UsageError("no signals configured".into()))?,
            };
            let sweep = CorruptionSweepConfig {
                epsilons: eps_grid.clone(),
                target_signal: target,
                tau: cfg.tau,
                betas: beta_grid.clone(),
            };
            let points = sweep_corruption(&pool, &z, &cfg.weights, &cfg.market_config(), &sweep)?;
            let rows = points.iter().map(|p| {
                vec![
                    fmt_f64(p.epsilon),
                    fmt_f64(p.beta),
                    fmt_f64(p.price_l1),
                    fmt_f64(p.share_linf),
                    fmt_f64(p.share_bound),
                    fmt_f64(p.stated_price_bound),
                ]
            });
            let header = ["epsilon", "beta", "price_l1", "share_linf", "share_bound", "stated_price_bound"];
            emit(out.as_deref(), &csv_bytes(&header, rows)?)
        }
    }
}

pub fn sweep(args: &PipelineArgs, betas: &[f64], gammas: &[f64], out: Option<&Path>) -> Result<()> {
    let cfg = args.resolve(true)?;
    let pool = open_pool(&pool_path(&cfg)?, &args.load_options())?;
    let raw = build_signal_table(&pool, &cfg.signal_specs().map_err(Error::from)?).map_err(Error::from)?;
    let z = standardize_table(&raw, &pool, &cfg.standardize_config()).map_err(Error::from)?;
    let points = sweep_hyperparams(
        &pool,
        &z,
        &cfg.weights,
        &cfg.market_config(),
        &cfg.selection_config(&pool),
        betas,
        gammas,
    )?;
    let rows = points.iter().map(|p| {
        let mass: Vec<String> = p.topic_mass.iter().map(|(t, m)| format!("{t}={}", fmt_f64(*m))).collect();
        vec![
            fmt_f64(p.beta),
            fmt_f64(p.gamma),
            fmt_f64(p.jaccard),
            p.count.to_string(),
            p.tokens_used.to_string(),
            fmt_f64(p.median_tokens),
            mass.join(";"),
        ]
    });
    let header = ["beta", "gamma", "jaccard", "count", "tokens_used", "median_tokens", "topic_mass"];
    emit(out, &csv_bytes(&header, rows)?)
}

fn read_dump(path: &Path) -> Result<Vec<PriceRow>> {
    let file = File::open(path).with_context(|| format!("cannot read price dump {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("cannot read price dump {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 1))?);
    }
    Ok(rows)
}

pub fn explain_cmd(run_dir: &Path, id: &str, pool_override: Option<PathBuf>, json: bool) -> Result<()> {
    let report_path = run_dir.join(REPORT_FILE);
    let text = std::fs::read_to_string(&report_path).with_context(|| format!("cannot read {}", report_path.display()))?;
    let report: RunReport =
        serde_json::from_str(&text).with_context(|| format!("cannot parse {}", report_path.display()))?;
    let rows = read_dump(&run_dir.join(PRICES_FILE))?;
    let path = match pool_override {
        Some(p) => p,
        None => pool_path(&report.config)?,
    };
    let pool = open_pool(&path, &Default::default())?;
    let outcome = pipeline::run(&pool, &report.config)?;
    check_dump(&pool, &outcome, &rows).map_err(|msg| InvariantError(format!("{msg}; was the pool modified after the run?")))?;
    if outcome.selection.report.selected != report.selection.selected {
        return Err(InvariantError("replayed selection differs from the run report".into()).into());
    }
    let e = explain(&pool, &outcome, id)?;
    if json {
        println!("{}", to_rounded_pretty(&e)?);
    } else {
        println!("{e}");
    }
    Ok(())
}
