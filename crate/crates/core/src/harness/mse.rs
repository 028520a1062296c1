//! Single-batch advantage MSE against the exact counterfactual advantage.

use crate::error::Result;
use crate::estimators::{
    c3_table, capo_exact_table, capo_fictitious_table, hagrpo_sequential_table, magrpo_table, AdvantageTable, EnvMeter,
};
use crate::exact_oracle::ChainKernel;
use crate::policy::{ChainPolicy, RolloutBatch};
use crate::reward_env::RewardModel;
use crate::ridge::{build_features, ridge_fit_fast};
use crate::trainer::IndirectMode;

use super::config::ExperimentConfig;
use super::output::ResultRow;
use super::{cell_stream, model_seed, par_map, policy_seed};

/// Per-agent MSE of every estimator at one `(K, lambda_int, seed)`.
/// `hagrpo` is scored after a sequential update pass, `hagrpo_nodrift` on
/// the untouched policy (where it equals MA-GRPO).
pub fn mse_cell(cfg: &ExperimentConfig, k: usize, lambda: f64, seed: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let m = &cfg.mse;
    let master = cfg.master_seed;
    let model = RewardModel::sample(model_seed(master, k, seed), k, cfg.actions, lambda, cfg.sigma)?;
    let policy = ChainPolicy::init(policy_seed(master, k, 0.0, seed), k, cfg.actions, 0.0)?;
    let stream = |label| cell_stream(master, k, lambda, 0.0, seed, label);
    let batch = RolloutBatch::collect(&model, &policy, m.n, &mut stream("batch"))?;
    let kernel = ChainKernel::new(&policy);
    let truth: Vec<Vec<f64>> = (0..batch.len())
        .map(|n| kernel.advantages_along(&model, batch.joint(n)))
        .collect();
    let fit = ridge_fit_fast(&build_features(&batch), batch.rewards(), m.ridge_lambda)?;
    let capo = match m.capo_indirect {
        IndirectMode::Exact => capo_exact_table(&fit, &policy, &batch)?,
        IndirectMode::Fictitious => capo_fictitious_table(&fit, &policy, &batch, m.l, &mut stream("capo"))?,
    };
    let mut meter = EnvMeter::default();
    let c3 = c3_table(&model, &policy, &batch, m.m_c3, &mut stream("c3"), &mut meter)?;
    let magrpo = magrpo_table(&batch)?;
    let hagrpo = hagrpo_sequential_table(&batch, &policy, &cfg.train.ppo(), m.is_clip)?;
    let per_agent = |t: &AdvantageTable| -> Vec<f64> {
        (0..k)
            .map(|j| {
                (0..batch.len())
                    .map(|n| (t.get(n, j) - truth[n][j]).powi(2))
                    .sum::<f64>()
                    / batch.len() as f64
            })
            .collect()
    };
    Ok(vec![
        ("capo".into(), per_agent(&capo)),
        ("c3".into(), per_agent(&c3)),
        ("magrpo".into(), per_agent(&magrpo)),
        ("hagrpo".into(), per_agent(&hagrpo)),
        ("hagrpo_nodrift".into(), per_agent(&magrpo)),
    ])
}

pub fn run(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let mut tasks = Vec::new();
    for &k in &cfg.k_grid {
        for &lambda in &cfg.lambda_grid {
            for seed in 0..cfg.seeds {
                tasks.push((k, lambda, seed));
            }
        }
    }
    let results = par_map(cfg.workers, &tasks, |&(k, lambda, seed)| mse_cell(cfg, k, lambda, seed))?;
    let mut rows = Vec::new();
    for (&(k, lambda, seed), methods) in tasks.iter().zip(results) {
        for (method, per_agent) in methods {
            let row = |agent, value| ResultRow {
                experiment: cfg.experiment.to_string(),
                k,
                lambda_int: lambda,
                rho: 0.0,
                method: method.clone(),
                agent,
                seed,
                metric: "mse".into(),
                value,
            };
            for (j, v) in per_agent.iter().enumerate() {
                rows.push(row(Some(j), *v));
            }
            rows.push(row(None, per_agent.iter().sum::<f64>() / k as f64));
        }
    }
    Ok(rows)
}
