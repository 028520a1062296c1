//! Budget-matched training runs for the optimization and ablation sweeps.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::policy::ChainPolicy;
use crate::reward_env::RewardModel;
use crate::trainer::{regret_auc, run_method, RegretScale, TrainTrace};

use super::config::ExperimentConfig;
use super::output::{mean_se, ResultRow, TracePoint};
use super::{cell_stream, model_seed, par_map, policy_seed};

/// Real reward evaluations every method may spend at `k` agents.
pub fn budget(cfg: &ExperimentConfig, k: usize) -> Result<u64> {
    Ok(cfg.budget.anchor_iterations * cfg.train_config(cfg.budget.anchor)?.iteration_cost(k))
}

/// Trains every configured method on one `(K, lambda_int, rho, seed)` cell.
pub fn optim_cell(cfg: &ExperimentConfig, k: usize, lambda: f64, rho: f64, seed: usize) -> Result<Vec<TrainTrace>> {
    let master = cfg.master_seed;
    let model = RewardModel::sample(model_seed(master, k, seed), k, cfg.actions, lambda, cfg.sigma)?;
    let policy = ChainPolicy::init(policy_seed(master, k, rho, seed), k, cfg.actions, rho)?;
    let scale = RegretScale::new(&model)?;
    let total = budget(cfg, k)?;
    cfg.methods
        .iter()
        .map(|&method| {
            let tc = cfg.train_config(method)?;
            let mut rng = cell_stream(master, k, lambda, rho, seed, method.label());
            run_method(&model, &policy, total, &tc, &scale, &mut rng)
        })
        .collect()
}

pub fn run(cfg: &ExperimentConfig) -> Result<(Vec<ResultRow>, Vec<TracePoint>)> {
    let mut tasks = Vec::new();
    for &k in &cfg.k_grid {
        for &lambda in &cfg.lambda_grid {
            for &rho in &cfg.rho_grid {
                for seed in 0..cfg.seeds {
                    tasks.push((k, lambda, rho, seed));
                }
            }
        }
    }
    let results = par_map(cfg.workers, &tasks, |&(k, l, r, s)| optim_cell(cfg, k, l, r, s))?;
    let mut rows = Vec::new();
    // (K, lambda, rho, method index) -> traces over seeds
    let mut grouped: BTreeMap<(usize, u64, u64, usize), Vec<&TrainTrace>> = BTreeMap::new();
    for (&(k, lambda, rho, seed), traces) in tasks.iter().zip(&results) {
        for (i, t) in traces.iter().enumerate() {
            let row = |metric: &str, value: f64| ResultRow {
                experiment: cfg.experiment.to_string(),
                k,
                lambda_int: lambda,
                rho,
                method: t.method.label().into(),
                agent: None,
                seed,
                metric: metric.into(),
                value,
            };
            rows.push(row("auc", regret_auc(t)?));
            rows.push(row("final_regret", t.final_regret().unwrap_or(f64::NAN)));
            rows.push(row("iterations", t.iterations() as f64));
            rows.push(row("env_calls", *t.env_calls.last().unwrap_or(&0) as f64));
            let drift = &t.drift[1..];
            rows.push(row("mean_drift", if drift.is_empty() { 0.0 } else { drift.iter().sum::<f64>() / drift.len() as f64 }));
            grouped.entry((k, lambda.to_bits(), rho.to_bits(), i)).or_default().push(t);
        }
    }
    let mut points = Vec::new();
    for ((k, l, r, _), traces) in grouped {
        let first = traces[0];
        for it in 0..first.regrets.len() {
            let regrets: Vec<f64> = traces.iter().map(|t| t.regrets[it]).collect();
            let drift: Vec<f64> = traces.iter().map(|t| t.drift[it]).collect();
            let (mean, se) = mean_se(&regrets);
            points.push(TracePoint {
                k,
                lambda_int: f64::from_bits(l),
                rho: f64::from_bits(r),
                method: first.method.label().into(),
                iteration: it,
                env_calls: first.env_calls[it],
                regret_mean: mean,
                regret_se: se,
                drift_mean: mean_se(&drift).0,
            });
        }
    }
    Ok((rows, points))
}
