//! Property suites on small enumerable instances, reported as pass/fail with
//! the worst measured slack per check.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::Result;
use crate::estimators::{capo_decomposed_exact, direct_variance_check, gradient_mse_check};
use crate::exact_oracle::{
    bias_bound_check, check_factoredness, dstar_baseline, dstar_grid_optimality, enumerate_prefixes,
    factored_bias_check, ChainKernel, ReferenceKernel,
};
use crate::policy::{ChainPolicy, RolloutBatch};
use crate::reward_env::RewardModel;
use crate::ridge::{build_features, ridge_fit};
use crate::rng::{derive_seed, label_word, mix64, rng_from_seed};
use crate::trainer::{run_capo_iteration, TrainConfig};

use super::config::ExperimentConfig;
use super::output::ResultRow;
use super::par_map;

pub const CHECKS: [&str; 7] = [
    "upstream_cancellation",
    "bias_bound",
    "dstar_grid_optimality",
    "factoredness",
    "tower_identity",
    "gradient_mse_bound",
    "direct_variance_bound",
];

/// Outcome of one check on one instance. `worst` is the largest residual
/// for tolerance checks and the smallest `rhs - lhs` for bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOutcome {
    pub cases: usize,
    pub violations: usize,
    pub worst: f64,
}

impl CheckOutcome {
    fn residual() -> Self {
        Self { cases: 0, violations: 0, worst: 0.0 }
    }

    fn slack() -> Self {
        Self { cases: 0, violations: 0, worst: f64::INFINITY }
    }

    fn within(&mut self, residual: f64, tol: f64) {
        self.cases += 1;
        self.worst = self.worst.max(residual);
        if !(residual <= tol) {
            self.violations += 1;
        }
    }

    fn bound(&mut self, lhs: f64, rhs: f64) {
        self.cases += 1;
        self.worst = self.worst.min(rhs - lhs);
        if !(lhs <= rhs) {
            self.violations += 1;
        }
    }

    fn flag(&mut self, ok: bool) {
        self.cases += 1;
        if !ok {
            self.violations += 1;
        }
    }
}

/// One random instance of the suite.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model: RewardModel,
    pub policy: ChainPolicy,
    pub rho: f64,
}

/// Draws instance `i`: `K` in 2..=4, `A` in 2..=4 with at most 256 joint
/// actions, random interaction strength and tilt.
pub fn instance(master: u64, i: usize) -> Result<Instance> {
    let seed = derive_seed(&[master, label_word("theory"), i as u64]);
    let mut rng = rng_from_seed(seed);
    let k = rng.random_range(2..=4usize);
    let a = rng.random_range(2..=4usize);
    let lambda = rng.random_range(0.0..1.0);
    let rho = rng.random_range(0.0..3.0);
    Ok(Instance {
        model: RewardModel::sample(mix64(seed), k, a, lambda, 0.5)?,
        policy: ChainPolicy::init(mix64(seed ^ 1), k, a, rho)?,
        rho,
    })
}

fn random_factored(k: usize, a: usize, rng: &mut impl Rng) -> Result<ChainPolicy> {
    let marg: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let w: Vec<f64> = (0..a).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect();
    ChainPolicy::factored(&marg)
}

/// Runs every check on instance `i`.
pub fn check_instance(cfg: &ExperimentConfig, i: usize) -> Result<(Instance, Vec<CheckOutcome>)> {
    let t = &cfg.theory;
    let inst = instance(cfg.master_seed, i)?;
    let (model, pi) = (&inst.model, &inst.policy);
    let (k_agents, a) = (pi.agents(), pi.actions());
    let mut rng = rng_from_seed(derive_seed(&[cfg.master_seed, label_word("theory-run"), i as u64]));
    let batch = RolloutBatch::collect(model, pi, 32, &mut rng)?;
    let fit = ridge_fit(&build_features(&batch), batch.rewards(), 0.1)?;
    let kernel = ChainKernel::new(pi);

    let mut cancel = CheckOutcome::residual();
    let mut tower = CheckOutcome::residual();
    for k in 0..k_agents {
        let mut prefixes = Vec::new();
        enumerate_prefixes(pi, k, |p, _| prefixes.push(p.to_vec()))?;
        for prefix in &prefixes {
            let row = pi.row(k, if k == 0 { 0 } else { prefix[k - 1] });
            let mut mean = 0.0;
            for x in 0..a {
                let decomposed = capo_decomposed_exact(&fit, pi, prefix, x)?;
                let direct = kernel.advantage(&fit, prefix, x)?;
                cancel.within((decomposed - direct).abs(), t.cancellation_tol);
                mean += row[x] * kernel.advantage(model, prefix, x)?;
            }
            tower.within(mean.abs(), t.tower_tol);
        }
    }

    // target policy: one CAPO iteration away from the logging policy
    let mut bias = CheckOutcome::slack();
    let train = TrainConfig { l: 16, ..cfg.train };
    let (target, _) = run_capo_iteration(pi, model, &train, false, &mut rng)?;
    for k in 0..k_agents {
        let mut prefixes = Vec::new();
        enumerate_prefixes(pi, k, |p, _| prefixes.push(p.to_vec()))?;
        for prefix in &prefixes {
            for x in 0..a {
                let b = bias_bound_check(model, &target, pi, &fit, prefix, x)?;
                bias.bound(b.lhs, b.rhs * (1.0 + 1e-12) + 1e-12);
            }
        }
    }
    let mu_f = random_factored(k_agents, a, &mut rng)?;
    let pi_f = random_factored(k_agents, a, &mut rng)?;
    for k in 0..k_agents {
        let b = factored_bias_check(model, &pi_f, &mu_f, k)?;
        bias.bound(b.lhs, b.rhs * (1.0 + 1e-12) + 1e-12);
    }

    let mut grid = CheckOutcome::residual();
    let mut factored = CheckOutcome::residual();
    let uniform = vec![1.0 / a as f64; a];
    let salt = rng.random::<u64>();
    for k in 0..k_agents {
        for rk in [ReferenceKernel::Policy, ReferenceKernel::Fixed(uniform.clone())] {
            let g = dstar_grid_optimality(model, pi, k, &rk)?;
            grid.cases += g.cases;
            grid.violations += g.failures;
        }
        let hashed = |p: &[usize]| {
            let h = p.iter().fold(salt, |h, &x| mix64(h ^ x as u64));
            (h >> 11) as f64 / (1u64 << 53) as f64 * 10.0 - 5.0
        };
        let dstar = |p: &[usize]| {
            let row = pi.row(k, if k == 0 { 0 } else { p[k - 1] });
            dstar_baseline(model, pi, p, row).unwrap_or(f64::NAN)
        };
        let value = |p: &[usize]| kernel.conditional_mean_unchecked(model, p);
        factored.flag(check_factoredness(model, pi, k, |_, _| 0.0)?);
        factored.flag(check_factoredness(model, pi, k, |p, _| dstar(p))?);
        factored.flag(check_factoredness(model, pi, k, |p, _| value(p))?);
        factored.flag(check_factoredness(model, pi, k, |p, _| hashed(p))?);
    }

    let mut grad = CheckOutcome::slack();
    for k in 0..k_agents {
        for l in [8, 64] {
            let c = gradient_mse_check(model, pi, &fit, k, l, t.gradient_reps, &mut rng)?;
            grad.bound(c.lhs, c.rhs);
        }
    }

    let mut var = CheckOutcome::slack();
    if i < t.variance_instances {
        let additive = model.with_lambda_int(0.0)?;
        let c = direct_variance_check(&additive, pi, cfg.mse.n, cfg.mse.ridge_lambda, t.variance_batches, &mut rng)?;
        var.bound(c.max_var, c.bound * (1.0 + t.variance_slack));
    }
    Ok((inst, vec![cancel, bias, grid, factored, tower, grad, var]))
}

/// Aggregated suite outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryReport {
    /// `(check, instances, cases, violations, worst)`.
    pub checks: Vec<(String, usize, usize, usize, f64)>,
}

impl TheoryReport {
    pub fn violations(&self) -> usize {
        self.checks.iter().map(|c| c.3).sum()
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0
    }

    pub fn markdown(&self, cfg: &ExperimentConfig) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# theory-check\n");
        let _ = writeln!(s, "Instances: {}. Master seed: {}.\n", cfg.seeds, cfg.master_seed);
        let _ = writeln!(s, "| check | instances | cases | violations | worst | result |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for (name, inst, cases, bad, worst) in &self.checks {
            let verdict = if *bad == 0 { "pass" } else { "FAIL" };
            let _ = writeln!(s, "| {name} | {inst} | {cases} | {bad} | {worst:.3e} | {verdict} |");
        }
        let _ = writeln!(
            s,
            "\n`worst` is the largest residual for tolerance checks and the smallest `rhs - lhs` for bounds."
        );
        s
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<(Vec<ResultRow>, TheoryReport)> {
    let ids: Vec<usize> = (0..cfg.seeds).collect();
    let results = par_map(cfg.workers, &ids, |&i| check_instance(cfg, i))?;
    let mut rows = Vec::new();
    let mut agg: Vec<(String, usize, usize, usize, f64)> = CHECKS
        .iter()
        .enumerate()
        .map(|(j, n)| (n.to_string(), 0, 0, 0, if matches!(j, 0 | 3 | 4) { 0.0 } else { f64::INFINITY }))
        .collect();
    for (i, (inst, outcomes)) in results.iter().enumerate() {
        for (j, o) in outcomes.iter().enumerate() {
            if o.cases == 0 {
                continue;
            }
            let row = |metric: &str, value: f64| ResultRow {
                experiment: cfg.experiment.to_string(),
                k: inst.policy.agents(),
                lambda_int: inst.model.lambda_int(),
                rho: inst.rho,
                method: CHECKS[j].into(),
                agent: None,
                seed: i,
                metric: metric.into(),
                value,
            };
            rows.push(row("cases", o.cases as f64));
            rows.push(row("violations", o.violations as f64));
            if o.worst.is_finite() {
                rows.push(row("worst", o.worst));
            }
            let a = &mut agg[j];
            a.1 += 1;
            a.2 += o.cases;
            a.3 += o.violations;
            a.4 = if matches!(j, 0 | 3 | 4) { a.4.max(o.worst) } else { a.4.min(o.worst) };
        }
    }
    Ok((rows, TheoryReport { checks: agg }))
}
