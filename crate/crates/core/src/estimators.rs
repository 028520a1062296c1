//! Per-agent advantage estimators.
//!
//! Every estimator maps a rollout batch to one advantage per rollout and
//! agent. CAPO variants read the ridge fit and the current joint policy;
//! MA-GRPO and HA-GRPO use the shared team reward; C3 spends extra real
//! reward evaluations on replays and charges them to an [`EnvMeter`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact_oracle::{enumerate_prefixes, ChainKernel};
use crate::policy::{ppo_update, ChainPolicy, PpoConfig, RolloutBatch};
use crate::reward_env::{PairwiseReward, RewardModel};
use crate::ridge::AttributionFit;
use crate::rng::sample_categorical;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorId {
    /// Direct plus exactly marginalized indirect effect.
    CapoExact,
    /// Direct effect plus fictitious-sampling indirect effect.
    CapoFictitious,
    CapoDirect,
    Magrpo,
    Hagrpo,
    C3,
}

impl EstimatorId {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorId::CapoExact => "capo_exact",
            EstimatorId::CapoFictitious => "capo_fictitious",
            EstimatorId::CapoDirect => "capo_direct",
            EstimatorId::Magrpo => "magrpo",
            EstimatorId::Hagrpo => "hagrpo",
            EstimatorId::C3 => "c3",
        }
    }
}

/// Advantages `A_hat[n][k]` from one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    pub estimator: EstimatorId,
    n: usize,
    k: usize,
    values: Vec<f64>,
    /// Real reward evaluations spent beyond the shared batch.
    pub env_calls_consumed: u64,
    /// Fictitious continuations drawn per rollout and agent (CAPO only).
    pub fictitious_draws_used: usize,
}

impl AdvantageTable {
    pub fn new(estimator: EstimatorId, n: usize, k: usize) -> Self {
        Self {
            estimator,
            n,
            k,
            values: vec![0.0; n * k],
            env_calls_consumed: 0,
            fictitious_draws_used: 0,
        }
    }

    pub fn rollouts(&self) -> usize {
        self.n
    }

    pub fn agents(&self) -> usize {
        self.k
    }

    pub fn get(&self, n: usize, k: usize) -> f64 {
        self.values[n * self.k + k]
    }

    /// Advantages of agent `k` over the batch.
    pub fn agent(&self, k: usize) -> Vec<f64> {
        (0..self.n).map(|n| self.get(n, k)).collect()
    }

    pub fn set_agent(&mut self, k: usize, values: &[f64]) -> Result<()> {
        if k >= self.k || values.len() != self.n {
            return Err(Error::Domain("advantage column has the wrong shape".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite advantage".into()));
        }
        for (n, v) in values.iter().enumerate() {
            self.values[n * self.k + k] = *v;
        }
        Ok(())
    }
}

/// Real-environment call counter with an optional hard budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EnvMeter {
    pub used: u64,
    pub budget: Option<u64>,
}

impl EnvMeter {
    pub fn with_budget(budget: u64) -> Self {
        Self {
            used: 0,
            budget: Some(budget),
        }
    }

    pub fn remaining(&self) -> Option<u64> {
        self.budget.map(|b| b.saturating_sub(self.used))
    }

    /// Reserves `calls` evaluations or fails without charging anything.
    pub fn charge(&mut self, calls: u64) -> Result<()> {
        if let Some(left) = self.remaining() {
            if calls > left {
                return Err(Error::Budget(format!(
                    "{calls} environment calls requested with {left} remaining"
                )));
            }
        }
        self.used += calls;
        Ok(())
    }
}

fn check_shapes(fit: &AttributionFit, policy: &ChainPolicy) -> Result<()> {
    if fit.agents() != policy.agents() || fit.actions() != policy.actions() {
        return Err(Error::Domain("fit and policy shapes differ".into()));
    }
    Ok(())
}

fn check_batch(batch: &RolloutBatch, policy: &ChainPolicy, k: usize) -> Result<()> {
    if batch.agents() != policy.agents() || batch.actions() != policy.actions() {
        return Err(Error::Domain("batch and policy shapes differ".into()));
    }
    if k >= policy.agents() {
        return Err(Error::Domain(format!("agent {k} out of range")));
    }
    Ok(())
}

/// Law of `a_j` given the realized `a_{<k}` (only `a_{k-1}` matters).
fn upstream_law<'a>(kernel: &'a ChainKernel, joint: &[usize], k: usize, j: usize) -> &'a [f64] {
    if k == 0 {
        kernel.marginal(j)
    } else {
        kernel.forward_row(k - 1, j, joint[k - 1])
    }
}

fn dot(p: &[f64], v: &[f64]) -> f64 {
    p.iter().zip(v).map(|(x, y)| x * y).sum()
}

/// `D_k = phi_k(a_k) - sum_x pi_k(x | a_{k-1}) phi_k(x)`.
fn direct(fit: &AttributionFit, policy: &ChainPolicy, joint: &[usize], k: usize) -> f64 {
    let row = policy.row(k, if k == 0 { 0 } else { joint[k - 1] });
    fit.phi(k)[joint[k]] - dot(row, fit.phi(k))
}

/// Exact indirect effect `I_k` along a joint action.
fn indirect_exact(fit: &AttributionFit, kernel: &ChainKernel, joint: &[usize], k: usize) -> f64 {
    (k + 1..kernel.agents())
        .map(|j| {
            let after = kernel.forward_row(k, j, joint[k]);
            let before = upstream_law(kernel, joint, k, j);
            dot(after, fit.phi(j)) - dot(before, fit.phi(j))
        })
        .sum()
}

/// `D_k + I_k` at one `(a_{<k}, a_k)`, both effects exact.
pub fn capo_decomposed_exact(fit: &AttributionFit, policy: &ChainPolicy, prefix: &[usize], focal: usize) -> Result<f64> {
    check_shapes(fit, policy)?;
    let k = prefix.len();
    if k >= policy.agents() || focal >= policy.actions() || prefix.iter().any(|&x| x >= policy.actions()) {
        return Err(Error::Domain("invalid prefix or focal action".into()));
    }
    let kernel = ChainKernel::new(policy);
    let mut joint = prefix.to_vec();
    joint.push(focal);
    Ok(direct(fit, policy, &joint, k) + indirect_exact(fit, &kernel, &joint, k))
}

/// Exact CAPO advantages of agent `k` for every rollout.
pub fn capo_exact_agent(
    fit: &AttributionFit,
    policy: &ChainPolicy,
    kernel: &ChainKernel,
    batch: &RolloutBatch,
    k: usize,
) -> Result<Vec<f64>> {
    check_shapes(fit, policy)?;
    check_batch(batch, policy, k)?;
    Ok((0..batch.len())
        .map(|n| {
            let joint = batch.joint(n);
            direct(fit, policy, joint, k) + indirect_exact(fit, kernel, joint, k)
        })
        .collect())
}

/// Direct effects `D_k` of agent `k` for every rollout.
pub fn capo_direct(fit: &AttributionFit, policy: &ChainPolicy, batch: &RolloutBatch, k: usize) -> Result<Vec<f64>> {
    check_shapes(fit, policy)?;
    check_batch(batch, policy, k)?;
    Ok((0..batch.len()).map(|n| direct(fit, policy, batch.joint(n), k)).collect())
}

/// CAPO advantages split into the closed-form direct effect and the
/// fictitious-sampling indirect effect.
#[derive(Debug, Clone, PartialEq)]
pub struct FictitiousParts {
    pub direct: Vec<f64>,
    pub indirect: Vec<f64>,
}

impl FictitiousParts {
    pub fn total(&self) -> Vec<f64> {
        self.direct.iter().zip(&self.indirect).map(|(d, i)| d + i).collect()
    }
}

// sum_{j>k} phi_j along one chain continuation started at `start`
#[inline]
fn suffix_phi<R: Rng + ?Sized>(fit: &AttributionFit, policy: &ChainPolicy, k: usize, start: usize, rng: &mut R) -> f64 {
    let mut prev = start;
    let mut total = 0.0;
    for j in k + 1..policy.agents() {
        prev = sample_categorical(policy.row(j, prev), rng);
        total += fit.unary(j, prev);
    }
    total
}

/// Fictitious-sampling CAPO for agent `k`: for each rollout, `L` suffixes
/// continue the realized `a_k` and `L` suffixes continue a counterfactual
/// `a'_k ~ pi_k(. | a_{k-1})`; the indirect effect is the mean difference of
/// their downstream fitted components. No real reward is evaluated.
pub fn capo_fictitious<R: Rng + ?Sized>(
    fit: &AttributionFit,
    policy: &ChainPolicy,
    batch: &RolloutBatch,
    k: usize,
    l: usize,
    rng: &mut R,
) -> Result<FictitiousParts> {
    check_shapes(fit, policy)?;
    check_batch(batch, policy, k)?;
    if l == 0 {
        return Err(Error::Config("fictitious sample count L must be positive".into()));
    }
    let mut out = FictitiousParts {
        direct: Vec::with_capacity(batch.len()),
        indirect: Vec::with_capacity(batch.len()),
    };
    let last = k + 1 == policy.agents();
    for n in 0..batch.len() {
        let joint = batch.joint(n);
        out.direct.push(direct(fit, policy, joint, k));
        if last {
            out.indirect.push(0.0);
            continue;
        }
        let focal_row = policy.row(k, if k == 0 { 0 } else { joint[k - 1] });
        let mut diff = 0.0;
        for _ in 0..l {
            let factual = suffix_phi(fit, policy, k, joint[k], rng);
            let alt = sample_categorical(focal_row, rng);
            diff += factual - suffix_phi(fit, policy, k, alt, rng);
        }
        out.indirect.push(diff / l as f64);
    }
    Ok(out)
}

/// `R - mean(R)`, shared by every agent.
pub fn magrpo(batch: &RolloutBatch) -> Result<Vec<f64>> {
    if batch.len() < 2 {
        return Err(Error::Data("MA-GRPO needs at least two rollouts".into()));
    }
    let mean = batch.reward_mean();
    Ok(batch.rewards().iter().map(|r| r - mean).collect())
}

/// Clipped cumulative importance weight `min(prod_{j<k} pi_j / mu_j, clip)`
/// of each rollout, where `current` holds the agents already updated.
pub fn hagrpo_weights(batch: &RolloutBatch, current: &ChainPolicy, k: usize, clip: f64) -> Result<Vec<f64>> {
    check_batch(batch, current, k)?;
    (0..batch.len())
        .map(|n| {
            let joint = batch.joint(n);
            let mut log_ratio = 0.0;
            for j in 0..k {
                let p = current.prob_in(j, joint);
                if p <= 0.0 {
                    return Err(Error::Numeric("zero target probability on a realized action".into()));
                }
                log_ratio += p.ln() - batch.log_prob(n, j);
            }
            Ok(log_ratio.exp().min(clip))
        })
        .collect()
}

/// HA-GRPO: the shared advantage reweighted by the clipped prefix ratio.
pub fn hagrpo(batch: &RolloutBatch, current: &ChainPolicy, k: usize, clip: f64) -> Result<Vec<f64>> {
    let shared = magrpo(batch)?;
    let w = hagrpo_weights(batch, current, k, clip)?;
    Ok(shared.iter().zip(&w).map(|(a, w)| a * w).collect())
}

/// C3 for agent `k`: `M_c3` replays per rollout, each drawing an alternative
/// focal action and a fresh suffix from the logging policy `mu` and paying
/// one real reward evaluation. `A = R - mean(replay rewards)`.
#[allow(clippy::too_many_arguments)]
pub fn c3<R: Rng + ?Sized>(
    model: &RewardModel,
    mu: &ChainPolicy,
    batch: &RolloutBatch,
    k: usize,
    replays: usize,
    rng: &mut R,
    meter: &mut EnvMeter,
) -> Result<Vec<f64>> {
    check_batch(batch, mu, k)?;
    if replays == 0 {
        return Err(Error::Config("C3 replay count must be positive".into()));
    }
    meter.charge((batch.len() * replays) as u64)?;
    let kk = mu.agents();
    let mut scratch = vec![0; kk];
    let mut out = Vec::with_capacity(batch.len());
    for n in 0..batch.len() {
        let joint = batch.joint(n);
        scratch[..k].copy_from_slice(&joint[..k]);
        let focal_row = mu.row(k, if k == 0 { 0 } else { joint[k - 1] });
        let mut total = 0.0;
        for _ in 0..replays {
            scratch[k] = sample_categorical(focal_row, rng);
            for j in k + 1..kk {
                scratch[j] = sample_categorical(mu.row(j, scratch[j - 1]), rng);
            }
            total += model.sample_reward(&scratch, rng)?;
        }
        out.push(batch.rewards()[n] - total / replays as f64);
    }
    Ok(out)
}

/// All-agent CAPO table with exact indirect effects under one policy.
pub fn capo_exact_table(fit: &AttributionFit, policy: &ChainPolicy, batch: &RolloutBatch) -> Result<AdvantageTable> {
    let kernel = ChainKernel::new(policy);
    let mut t = AdvantageTable::new(EstimatorId::CapoExact, batch.len(), policy.agents());
    for k in 0..policy.agents() {
        t.set_agent(k, &capo_exact_agent(fit, policy, &kernel, batch, k)?)?;
    }
    Ok(t)
}

/// All-agent fictitious CAPO table under one policy.
pub fn capo_fictitious_table<R: Rng + ?Sized>(
    fit: &AttributionFit,
    policy: &ChainPolicy,
    batch: &RolloutBatch,
    l: usize,
    rng: &mut R,
) -> Result<AdvantageTable> {
    let mut t = AdvantageTable::new(EstimatorId::CapoFictitious, batch.len(), policy.agents());
    for k in 0..policy.agents() {
        t.set_agent(k, &capo_fictitious(fit, policy, batch, k, l, rng)?.total())?;
    }
    t.fictitious_draws_used = 2 * l;
    Ok(t)
}

/// All-agent MA-GRPO table.
pub fn magrpo_table(batch: &RolloutBatch) -> Result<AdvantageTable> {
    let shared = magrpo(batch)?;
    let mut t = AdvantageTable::new(EstimatorId::Magrpo, batch.len(), batch.agents());
    for k in 0..batch.agents() {
        t.set_agent(k, &shared)?;
    }
    Ok(t)
}

/// HA-GRPO table scored along one sequential pass: agent `k` is scored after
/// agents `j < k` took `M` PPO steps on their own HA-GRPO advantages, so the
/// cumulative ratio reflects the drift of an actual update sweep.
pub fn hagrpo_sequential_table(batch: &RolloutBatch, mu: &ChainPolicy, ppo: &PpoConfig, clip: f64) -> Result<AdvantageTable> {
    let mut t = AdvantageTable::new(EstimatorId::Hagrpo, batch.len(), mu.agents());
    let mut current = mu.clone();
    for k in 0..mu.agents() {
        let adv = hagrpo(batch, &current, k, clip)?;
        t.set_agent(k, &adv)?;
        current = ppo_update(&current, k, batch, &adv, ppo)?;
    }
    Ok(t)
}

/// All-agent C3 table under the logging policy.
pub fn c3_table<R: Rng + ?Sized>(
    model: &RewardModel,
    mu: &ChainPolicy,
    batch: &RolloutBatch,
    replays: usize,
    rng: &mut R,
    meter: &mut EnvMeter,
) -> Result<AdvantageTable> {
    let before = meter.used;
    let mut t = AdvantageTable::new(EstimatorId::C3, batch.len(), mu.agents());
    for k in 0..mu.agents() {
        t.set_agent(k, &c3(model, mu, batch, k, replays, rng, meter)?)?;
    }
    t.env_calls_consumed = meter.used - before;
    Ok(t)
}

/// Score `d/dtheta_k log pi_k(a_k | a_{k-1})` over agent `k`'s logit block.
pub fn score(policy: &ChainPolicy, k: usize, prev: usize, a_k: usize) -> Vec<f64> {
    let a = policy.actions();
    let mut s = vec![0.0; policy.block_len(k)];
    let base = if k == 0 { 0 } else { prev * a };
    for (x, p) in policy.row(k, prev).iter().enumerate() {
        s[base + x] = f64::from(u8::from(x == a_k)) - p;
    }
    s
}

/// Exact and simulated sides of the gradient mean-squared-error bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientMseCheck {
    /// Monte Carlo estimate of `E ||g_hat - g*||^2`.
    pub lhs: f64,
    /// Standard error of `lhs`.
    pub lhs_se: f64,
    pub rhs: f64,
    /// `Var(A_k s_k) = E||A s||^2 - ||g*||^2`.
    pub variance: f64,
    /// `B_k = max |A_hat - A|` over enumerated `a_{<=k}`.
    pub bias_sup: f64,
    pub score_sq: f64,
}

/// Checks the on-policy gradient MSE bound for agent `k`: `g_hat` averages
/// `A_hat s_k` over `l` draws of `a_{<=k}` from `policy`, with `A_hat` the
/// exact CAPO advantage of `fit` and `g*` the exact gradient of the true
/// counterfactual advantage.
pub fn gradient_mse_check<R: Rng + ?Sized>(
    model: &RewardModel,
    policy: &ChainPolicy,
    fit: &AttributionFit,
    k: usize,
    l: usize,
    reps: usize,
    rng: &mut R,
) -> Result<GradientMseCheck> {
    check_shapes(fit, policy)?;
    if k >= policy.agents() || l == 0 || reps < 2 {
        return Err(Error::Config("invalid agent, L or repetition count".into()));
    }
    let a = policy.actions();
    let kernel = ChainKernel::new(policy);
    let dim = policy.block_len(k);
    let mut g_star = vec![0.0; dim];
    let (mut as_sq, mut s_sq, mut bias_sup) = (0.0, 0.0, 0.0f64);
    let mut prefixes = Vec::new();
    enumerate_prefixes(policy, k + 1, |p, w| prefixes.push((p.to_vec(), w)))?;
    for (prefix, w) in &prefixes {
        let truth = kernel.advantage(model, &prefix[..k], prefix[k])?;
        let est = capo_decomposed_exact(fit, policy, &prefix[..k], prefix[k])?;
        bias_sup = bias_sup.max((est - truth).abs());
        let prev = if k == 0 { 0 } else { prefix[k - 1] };
        let s = score(policy, k, prev, prefix[k]);
        let norm: f64 = s.iter().map(|v| v * v).sum();
        for (g, sv) in g_star.iter_mut().zip(&s) {
            *g += w * truth * sv;
        }
        as_sq += w * truth * truth * norm;
        s_sq += w * norm;
    }
    let g_norm: f64 = g_star.iter().map(|v| v * v).sum();
    let variance = (as_sq - g_norm).max(0.0);

    // A_hat s_k depends only on (a_{k-1}, a_k) for an additive fit
    let prev_law: Vec<f64> = if k == 0 { vec![1.0] } else { kernel.marginal(k - 1).to_vec() };
    let mut cells = Vec::with_capacity(prev_law.len() * a);
    for c in 0..prev_law.len() {
        for x in 0..a {
            let mut joint = vec![0; k + 1];
            if k > 0 {
                joint[k - 1] = c;
            }
            joint[k] = x;
            let d = direct(fit, policy, &joint, k) + indirect_exact(fit, &kernel, &joint, k);
            let s = score(policy, k, c, x);
            cells.push(s.iter().map(|v| d * v).collect::<Vec<f64>>());
        }
    }
    let (mut m1, mut m2) = (0.0, 0.0);
    let mut g_hat = vec![0.0; dim];
    for _ in 0..reps {
        g_hat.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..l {
            let c = sample_categorical(&prev_law, rng);
            let x = sample_categorical(policy.row(k, c), rng);
            for (g, v) in g_hat.iter_mut().zip(&cells[c * a + x]) {
                *g += v;
            }
        }
        let err: f64 = g_hat
            .iter()
            .zip(&g_star)
            .map(|(g, t)| (g / l as f64 - t).powi(2))
            .sum();
        m1 += err;
        m2 += err * err;
    }
    let mean = m1 / reps as f64;
    let var = (m2 / reps as f64 - mean * mean).max(0.0) * reps as f64 / (reps as f64 - 1.0);
    Ok(GradientMseCheck {
        lhs: mean,
        lhs_se: (var / reps as f64).sqrt(),
        rhs: 2.0 / l as f64 * variance + 2.0 * bias_sup * bias_sup * s_sq,
        variance,
        bias_sup,
        score_sq: s_sq,
    })
}

/// Spread of the direct effect across independently resampled batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectVariance {
    /// Largest variance of `D_k(a_{k-1}, a_k)` over agents and cells.
    pub max_var: f64,
    /// Variance averaged over agents and cells.
    pub mean_var: f64,
    /// `2 R_max^2 / (lambda + N kappa)`.
    pub bound: f64,
    pub kappa: f64,
    pub r_max: f64,
}

impl DirectVariance {
    pub fn holds(&self, slack: f64) -> bool {
        self.max_var <= self.bound * (1.0 + slack)
    }
}

/// Resamples `batches` batches of `n` rollouts from `policy`, refits the
/// ridge model each time and measures the variance of every direct effect.
/// `kappa` is the smallest eigenvalue of the exact population Gram.
pub fn direct_variance_check<R: Rng + ?Sized>(
    model: &RewardModel,
    policy: &ChainPolicy,
    n: usize,
    lambda: f64,
    batches: usize,
    rng: &mut R,
) -> Result<DirectVariance> {
    if batches < 2 {
        return Err(Error::Config("need at least two batches".into()));
    }
    let (k, a) = (policy.agents(), policy.actions());
    let cells = |j: usize| if j == 0 { a } else { a * a };
    let total: usize = (0..k).map(cells).sum();
    let (mut s1, mut s2) = (vec![0.0; total], vec![0.0; total]);
    for _ in 0..batches {
        let batch = RolloutBatch::collect(model, policy, n, rng)?;
        let fit = crate::ridge::ridge_fit_fast(&crate::ridge::build_features(&batch), batch.rewards(), lambda)?;
        let mut idx = 0;
        for j in 0..k {
            for cell in 0..cells(j) {
                let (c, x) = (cell / a, cell % a);
                let row = policy.row(j, c);
                let d = fit.phi(j)[x] - dot(row, fit.phi(j));
                s1[idx] += d;
                s2[idx] += d * d;
                idx += 1;
            }
        }
    }
    let b = batches as f64;
    let vars: Vec<f64> = s1
        .iter()
        .zip(&s2)
        .map(|(m1, m2)| ((m2 - m1 * m1 / b) / (b - 1.0)).max(0.0))
        .collect();
    let kappa = crate::ridge::smallest_eigenvalue(&crate::ridge::population_gram(policy)).max(0.0);
    let r_max = model.max_abs_mean()?;
    Ok(DirectVariance {
        max_var: vars.iter().cloned().fold(0.0, f64::max),
        mean_var: vars.iter().sum::<f64>() / vars.len() as f64,
        bound: 2.0 * r_max * r_max / (lambda + n as f64 * kappa),
        kappa,
        r_max,
    })
}
