//! Experiment sweeps: configuration, seeded parallel execution and output
//! files.
//!
//! Every `(cell, seed)` task derives its own random streams from the master
//! seed and its coordinates, so results do not depend on the worker count or
//! on which other cells are in the grid.

pub mod config;
pub mod mse;
pub mod optim;
pub mod output;
pub mod theory;

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, label_word, rng_from_seed, SimRng};

pub use config::{ExperimentConfig, ExperimentId};
pub use output::ResultRow;
pub use theory::TheoryReport;

/// Seed of the reward model for `(K, seed)`; shared across `lambda_int`
/// (which only scales the pairwise part) and `rho`.
pub fn model_seed(master: u64, k: usize, seed: usize) -> u64 {
    derive_seed(&[master, label_word("model"), k as u64, seed as u64])
}

pub fn policy_seed(master: u64, k: usize, rho: f64, seed: usize) -> u64 {
    derive_seed(&[master, label_word("policy"), k as u64, rho.to_bits(), seed as u64])
}

/// Stream for one labelled consumer inside cell `(K, lambda, rho, seed)`.
pub fn cell_stream(master: u64, k: usize, lambda: f64, rho: f64, seed: usize, label: &str) -> SimRng {
    rng_from_seed(derive_seed(&[
        master,
        label_word("cell"),
        k as u64,
        lambda.to_bits(),
        rho.to_bits(),
        seed as u64,
        label_word(label),
    ]))
}

/// Runs `task` over `items` on `workers` threads, keeping input order.
pub fn par_map<T, U, F>(workers: usize, items: &[T], task: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    if workers == 1 {
        return items.iter().map(task).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(task).collect())
}

/// What a finished experiment produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub rows: Vec<ResultRow>,
    /// Present for `theory-check` only.
    pub theory: Option<TheoryReport>,
}

/// Runs the configured experiment and writes `results.csv`, `summary.md`
/// and `config.echo.json` under `<out>/<experiment>/`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = output::experiment_dir(out, cfg)?;
    output::write_echo(&dir, cfg)?;
    let (rows, summary, theory) = match cfg.experiment {
        ExperimentId::MseVsK | ExperimentId::MseVsLambda => {
            let rows = mse::run(cfg)?;
            let s = output::summary_markdown(cfg, &rows, "mse", "");
            (rows, s, None)
        }
        ExperimentId::Optim | ExperimentId::Ablation => {
            let (rows, traces) = optim::run(cfg)?;
            if cfg.traces {
                output::write_csv(&dir.join("traces.csv"), &traces)?;
            }
            let s = output::summary_markdown(cfg, &rows, "auc", "");
            (rows, s, None)
        }
        ExperimentId::TheoryCheck => {
            let (rows, report) = theory::run(cfg)?;
            let s = report.markdown(cfg);
            (rows, s, Some(report))
        }
    };
    output::write_csv(&dir.join("results.csv"), &rows)?;
    std::fs::write(dir.join("summary.md"), summary)?;
    Ok(RunOutcome { dir, rows, theory })
}
