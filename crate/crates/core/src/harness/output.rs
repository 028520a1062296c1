//! Result rows and the files written for each experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::config::ExperimentConfig;

/// One `(cell, seed, metric)` measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda_int: f64,
    pub rho: f64,
    pub method: String,
    pub agent: Option<usize>,
    pub seed: usize,
    pub metric: String,
    pub value: f64,
}

/// Seed-averaged regret trajectory point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda_int: f64,
    pub rho: f64,
    pub method: String,
    pub iteration: usize,
    pub env_calls: u64,
    pub regret_mean: f64,
    pub regret_se: f64,
    pub drift_mean: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: std::result::Result<Vec<ResultRow>, csv::Error> = r.deserialize().collect();
    Ok(rows?)
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// total order on cell coordinates for grouping
fn key(v: f64) -> u64 {
    v.to_bits()
}

/// Values of `metric` (agent-averaged rows only) grouped by `(K, lambda, rho,
/// method)`, in sorted order.
pub fn by_cell(rows: &[ResultRow], metric: &str) -> BTreeMap<(usize, u64, u64, String), Vec<f64>> {
    let mut out: BTreeMap<(usize, u64, u64, String), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == metric && r.agent.is_none()) {
        out.entry((r.k, key(r.lambda_int), key(r.rho), r.method.clone()))
            .or_default()
            .push(r.value);
    }
    out
}

fn fmt_pm((m, se): (f64, f64)) -> String {
    format!("{m:.4} ± {se:.4}")
}

/// Markdown summary: a pivot of the headline metric by team size (or
/// interaction strength) and method, then every cell.
pub fn summary_markdown(cfg: &ExperimentConfig, rows: &[ResultRow], headline: &str, extra: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {}\n", cfg.experiment);
    let _ = writeln!(s, "Seeds: {}. Master seed: {}. Values are mean ± standard error over seeds.\n", cfg.seeds, cfg.master_seed);
    let mut methods: Vec<String> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let by_lambda = cfg.k_grid.len() == 1 && cfg.lambda_grid.len() > 1;
    let (axis, coords): (&str, Vec<f64>) = if by_lambda {
        ("lambda_int", cfg.lambda_grid.clone())
    } else {
        ("K", cfg.k_grid.iter().map(|&k| k as f64).collect())
    };
    let _ = writeln!(s, "## {headline} by {axis} and method\n");
    let _ = writeln!(s, "| {axis} | {} |", methods.join(" | "));
    let _ = writeln!(s, "|---|{}", "---|".repeat(methods.len()));
    for c in coords {
        let mut line = format!("| {c} |");
        for m in &methods {
            let xs: Vec<f64> = rows
                .iter()
                .filter(|r| r.metric == headline && r.agent.is_none() && &r.method == m)
                .filter(|r| if by_lambda { r.lambda_int == c } else { r.k as f64 == c })
                .map(|r| r.value)
                .collect();
            let _ = write!(line, " {} |", if xs.is_empty() { "-".into() } else { fmt_pm(mean_se(&xs)) });
        }
        let _ = writeln!(s, "{line}");
    }
    let _ = writeln!(s, "\n## {headline} per cell\n");
    let _ = writeln!(s, "| K | lambda_int | rho | method | {headline} | seeds |");
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for ((k, l, r, m), xs) in by_cell(rows, headline) {
        let _ = writeln!(
            s,
            "| {k} | {} | {} | {m} | {} | {} |",
            f64::from_bits(l),
            f64::from_bits(r),
            fmt_pm(mean_se(&xs)),
            xs.len()
        );
    }
    if !extra.is_empty() {
        let _ = writeln!(s, "\n{extra}");
    }
    s
}

/// Output directory `<out>/<experiment>`, created if needed.
pub fn experiment_dir(out: &Path, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = out.join(cfg.experiment.as_str());
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn write_echo(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)?;
    fs::write(dir.join("config.echo.json"), text + "\n")?;
    Ok(())
}
