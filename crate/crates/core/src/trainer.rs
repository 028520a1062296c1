//! Outer training loops with real-environment accounting.
//!
//! Every method shares one skeleton per iteration: freeze the logging policy
//! `mu`, collect `N` real rollouts, then update agents in execution order with
//! `M` PPO steps each. Agents after `k` keep acting under `mu` while agent `k`
//! is updated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{c3, capo_direct, capo_exact_agent, capo_fictitious, hagrpo, magrpo, EnvMeter};
use crate::exact_oracle::ChainKernel;
use crate::policy::{agent_drift, ppo_update, ChainPolicy, PpoConfig, RolloutBatch};
use crate::reward_env::RewardModel;
use crate::ridge::{build_features, ridge_fit_fast};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Capo,
    CapoDirect,
    Magrpo,
    Hagrpo,
    C3,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Capo, Method::CapoDirect, Method::Magrpo, Method::Hagrpo, Method::C3];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Capo => "capo",
            Method::CapoDirect => "capo_direct",
            Method::Magrpo => "magrpo",
            Method::Hagrpo => "hagrpo",
            Method::C3 => "c3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// How CAPO evaluates the indirect effect during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndirectMode {
    /// `L` paired fictitious suffix draws.
    Fictitious,
    /// Exact chain marginalization (the `L -> infinity` limit).
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Real rollouts per iteration.
    pub n: usize,
    /// Fictitious continuations per rollout.
    pub l: usize,
    /// Inner PPO steps per agent.
    pub m: usize,
    pub eta: f64,
    pub clip_eps: f64,
    pub ridge_lambda: f64,
    pub m_c3: usize,
    /// Clip on HA-GRPO's cumulative importance ratio.
    pub is_clip: f64,
    pub indirect: IndirectMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Capo,
            n: 32,
            l: 64,
            m: 4,
            eta: 0.3,
            clip_eps: 0.2,
            ridge_lambda: 0.1,
            m_c3: 2,
            is_clip: 5.0,
            indirect: IndirectMode::Fictitious,
        }
    }
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn ppo(&self) -> PpoConfig {
        PpoConfig {
            steps: self.m,
            eta: self.eta,
            clip_eps: self.clip_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.l == 0 || self.m == 0 || self.m_c3 == 0 {
            return Err(Error::Config("N >= 2 and L, M, M_c3 >= 1 are required".into()));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.eta)));
        }
        if !(self.clip_eps > 0.0) || !(self.ridge_lambda > 0.0 && self.ridge_lambda.is_finite()) || !(self.is_clip > 0.0) {
            return Err(Error::Config("clip_eps, ridge_lambda and is_clip must be positive".into()));
        }
        Ok(())
    }

    /// Fields set away from their defaults that this method never reads.
    pub fn ignored_fields(&self) -> Vec<&'static str> {
        let d = Self::default();
        let capo = matches!(self.method, Method::Capo | Method::CapoDirect);
        let mut out = Vec::new();
        if !capo && self.ridge_lambda != d.ridge_lambda {
            out.push("ridge_lambda");
        }
        if self.method != Method::Capo && (self.l != d.l || self.indirect != d.indirect) {
            out.push(if self.l != d.l { "l" } else { "indirect" });
        }
        if self.method != Method::C3 && self.m_c3 != d.m_c3 {
            out.push("m_c3");
        }
        if self.method != Method::Hagrpo && self.is_clip != d.is_clip {
            out.push("is_clip");
        }
        out
    }

    /// Real reward evaluations per iteration at `k` agents.
    pub fn iteration_cost(&self, k: usize) -> u64 {
        match self.method {
            Method::C3 => (self.n * (1 + k * self.m_c3)) as u64,
            _ => self.n as u64,
        }
    }
}

/// Per-iteration bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    pub env_calls: u64,
    /// Maximum per-agent total-variation drift between `mu` and the result.
    pub drift: f64,
    pub batch_mean_reward: f64,
}

/// Normalizer for regret: `(V* - V) / (V* - V_unif)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretScale {
    pub v_star: f64,
    pub v_unif: f64,
}

impl RegretScale {
    pub fn new(model: &RewardModel) -> Result<Self> {
        let v_star = model.optimal_value()?;
        let uniform = ChainPolicy::uniform(model.agents(), model.actions())?;
        let v_unif = ChainKernel::new(&uniform).value(model);
        if !(v_star - v_unif > 1e-12) {
            return Err(Error::Numeric("optimal and uniform values coincide".into()));
        }
        Ok(Self { v_star, v_unif })
    }

    /// Normalized regret clipped below at 0.
    pub fn regret(&self, value: f64) -> f64 {
        ((self.v_star - value) / (self.v_star - self.v_unif)).max(0.0)
    }
}

pub fn normalized_regret(model: &RewardModel, policy: &ChainPolicy) -> Result<f64> {
    let scale = RegretScale::new(model)?;
    Ok(scale.regret(ChainKernel::new(policy).value(model)))
}

/// Training trajectory. Entry 0 is the initial policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub method: Method,
    pub values: Vec<f64>,
    pub regrets: Vec<f64>,
    /// Cumulative real reward evaluations after each entry.
    pub env_calls: Vec<u64>,
    pub drift: Vec<f64>,
}

impl TrainTrace {
    pub fn iterations(&self) -> usize {
        self.values.len().saturating_sub(1)
    }

    pub fn final_regret(&self) -> Option<f64> {
        self.regrets.last().copied()
    }
}

/// Mean normalized regret over the recorded entries.
pub fn regret_auc(trace: &TrainTrace) -> Result<f64> {
    if trace.regrets.is_empty() {
        return Err(Error::Data("empty trace".into()));
    }
    Ok(trace.regrets.iter().sum::<f64>() / trace.regrets.len() as f64)
}

fn max_drift(mu: &ChainPolicy, pi: &ChainPolicy) -> f64 {
    (0..mu.agents()).map(|j| agent_drift(mu, pi, j)).fold(0.0, f64::max)
}

/// One outer CAPO iteration: rollouts under `mu`, ridge fit, then for each
/// agent in execution order the advantage and `M` PPO steps, composing the
/// updated agent into the running policy. With `direct_only` the indirect
/// effect is dropped (CAPO-Direct).
pub fn run_capo_iteration<R: Rng + ?Sized>(
    policy: &ChainPolicy,
    model: &RewardModel,
    cfg: &TrainConfig,
    direct_only: bool,
    rng: &mut R,
) -> Result<(ChainPolicy, IterationStats)> {
    cfg.validate()?;
    let mu = policy;
    let batch = RolloutBatch::collect(model, mu, cfg.n, rng)?;
    let fit = ridge_fit_fast(&build_features(&batch), batch.rewards(), cfg.ridge_lambda)?;
    let ppo = cfg.ppo();
    let kernel = (!direct_only && cfg.indirect == IndirectMode::Exact).then(|| ChainKernel::new(mu));
    let mut current = mu.clone();
    for k in 0..mu.agents() {
        // agents >= k still act under mu, so advantages read `current`
        let adv = if direct_only {
            capo_direct(&fit, &current, &batch, k)?
        } else if let Some(kernel) = &kernel {
            capo_exact_agent(&fit, &current, kernel, &batch, k)?
        } else {
            capo_fictitious(&fit, &current, &batch, k, cfg.l, rng)?.total()
        };
        current = ppo_update(&current, k, &batch, &adv, &ppo)?;
    }
    let stats = IterationStats {
        env_calls: cfg.n as u64,
        drift: max_drift(mu, &current),
        batch_mean_reward: batch.reward_mean(),
    };
    Ok((current, stats))
}

/// One iteration of any method, charging real reward evaluations to `meter`.
pub fn run_iteration<R: Rng + ?Sized>(
    policy: &ChainPolicy,
    model: &RewardModel,
    cfg: &TrainConfig,
    rng: &mut R,
    meter: &mut EnvMeter,
) -> Result<(ChainPolicy, IterationStats)> {
    cfg.validate()?;
    meter.charge(cfg.n as u64)?;
    match cfg.method {
        Method::Capo => return run_capo_iteration(policy, model, cfg, false, rng),
        Method::CapoDirect => return run_capo_iteration(policy, model, cfg, true, rng),
        _ => {}
    }
    let mu = policy;
    let batch = RolloutBatch::collect(model, mu, cfg.n, rng)?;
    let ppo = cfg.ppo();
    let before = meter.used;
    let mut current = mu.clone();
    let shared = if cfg.method == Method::Magrpo { Some(magrpo(&batch)?) } else { None };
    for k in 0..mu.agents() {
        let adv = match cfg.method {
            Method::Magrpo => shared.clone().unwrap_or_default(),
            Method::Hagrpo => hagrpo(&batch, &current, k, cfg.is_clip)?,
            Method::C3 => c3(model, mu, &batch, k, cfg.m_c3, rng, meter)?,
            Method::Capo | Method::CapoDirect => unreachable!(),
        };
        current = ppo_update(&current, k, &batch, &adv, &ppo)?;
    }
    let stats = IterationStats {
        env_calls: cfg.n as u64 + (meter.used - before),
        drift: max_drift(mu, &current),
        batch_mean_reward: batch.reward_mean(),
    };
    Ok((current, stats))
}

/// Runs `cfg.method` from `initial` until the next iteration would exceed
/// `total_env_budget`, recording the exact value after every iteration.
pub fn run_method<R: Rng + ?Sized>(
    model: &RewardModel,
    initial: &ChainPolicy,
    total_env_budget: u64,
    cfg: &TrainConfig,
    scale: &RegretScale,
    rng: &mut R,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let cost = cfg.iteration_cost(model.agents());
    if total_env_budget < cost {
        return Err(Error::Budget(format!(
            "budget {total_env_budget} is below one {} iteration ({cost})",
            cfg.method.label()
        )));
    }
    let iterations = total_env_budget / cost;
    let v0 = ChainKernel::new(initial).value(model);
    let mut trace = TrainTrace {
        method: cfg.method,
        values: vec![v0],
        regrets: vec![scale.regret(v0)],
        env_calls: vec![0],
        drift: vec![0.0],
    };
    let mut meter = EnvMeter::with_budget(total_env_budget);
    let mut policy = initial.clone();
    for _ in 0..iterations {
        let (next, stats) = run_iteration(&policy, model, cfg, rng, &mut meter)?;
        policy = next;
        let v = ChainKernel::new(&policy).value(model);
        trace.values.push(v);
        trace.regrets.push(scale.regret(v));
        trace.env_calls.push(meter.used);
        trace.drift.push(stats.drift);
    }
    Ok(trace)
}
