//! Tabular autoregressive Markov-1 policies.
//!
//! Agent 0 draws from a single softmax row. Agent `j >= 1` draws from
//! `pi_j(. | a_{j-1} = c)`, one softmax row per upstream action `c`.
//! Updates never mutate a policy in place; they return a new value.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward_env::RewardModel;
use crate::rng::{rng_from_seed, sample_categorical};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyLogits", into = "PolicyLogits")]
pub struct ChainPolicy {
    k: usize,
    a: usize,
    /// Agent 0 occupies `[0, A)`; agent `j >= 1` occupies an `A x A` block,
    /// row `c` holding the logits of `pi_j(. | c)`.
    logits: Vec<f64>,
    probs: Vec<f64>,
}

/// Serialized form of a [`ChainPolicy`]; probabilities are recomputed on load.
#[derive(Serialize, Deserialize)]
struct PolicyLogits {
    agents: usize,
    actions: usize,
    logits: Vec<f64>,
}

impl From<ChainPolicy> for PolicyLogits {
    fn from(p: ChainPolicy) -> Self {
        Self {
            agents: p.k,
            actions: p.a,
            logits: p.logits,
        }
    }
}

impl TryFrom<PolicyLogits> for ChainPolicy {
    type Error = Error;

    fn try_from(raw: PolicyLogits) -> Result<Self> {
        let (k, a) = (raw.agents, raw.actions);
        if k < 1 || a < 2 || raw.logits.len() != a + (k - 1) * a * a {
            return Err(Error::Config("malformed serialized policy".into()));
        }
        Self::from_flat(k, a, raw.logits)
    }
}

impl ChainPolicy {
    /// Builds a policy from agent-0 logits and the `(K-1)` conditional logit
    /// matrices, concatenated row-major.
    pub fn from_logits(k: usize, a: usize, first: Vec<f64>, cond: Vec<f64>) -> Result<Self> {
        if k < 1 || a < 2 {
            return Err(Error::Config(format!("invalid policy shape K={k}, A={a}")));
        }
        if first.len() != a || cond.len() != (k - 1) * a * a {
            return Err(Error::Config(format!(
                "logit lengths ({}, {}) do not match K={k}, A={a}",
                first.len(),
                cond.len()
            )));
        }
        let mut logits = first;
        logits.extend(cond);
        Self::from_flat(k, a, logits)
    }

    fn from_flat(k: usize, a: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("policy logits must be finite".into()));
        }
        let mut probs = logits.clone();
        for row in probs.chunks_mut(a) {
            softmax_in_place(row);
        }
        Ok(Self { k, a, logits, probs })
    }

    /// Every conditional uniform.
    pub fn uniform(k: usize, a: usize) -> Result<Self> {
        Self::from_logits(k, a, vec![0.0; a], vec![0.0; k.saturating_sub(1) * a * a])
    }

    /// A factored policy: agent `j` draws from `marginals[j]` whatever its
    /// upstream action was.
    pub fn factored(marginals: &[Vec<f64>]) -> Result<Self> {
        let k = marginals.len();
        let a = marginals.first().map_or(0, Vec::len);
        if marginals.iter().any(|m| m.len() != a || m.iter().any(|&p| p <= 0.0)) {
            return Err(Error::Config(
                "factored marginals must share one length and be strictly positive".into(),
            ));
        }
        let first: Vec<f64> = marginals[0].iter().map(|p| p.ln()).collect();
        let mut cond = Vec::with_capacity(k.saturating_sub(1) * a * a);
        for m in &marginals[1..] {
            for _ in 0..a {
                cond.extend(m.iter().map(|p| p.ln()));
            }
        }
        Self::from_logits(k, a, first, cond)
    }

    /// Random initial policy with upstream-tilted conditionals.
    ///
    /// Each base row is a Dirichlet(1) draw. For agents `j >= 1` the row for
    /// upstream action `c` is tilted, `pi_j(a | c) ∝ base(a | c) * exp(rho * [a == c])`.
    /// Agent 0 keeps its untilted draw. Logits are stored as log-probabilities.
    pub fn init(seed: u64, k: usize, a: usize, rho: f64) -> Result<Self> {
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::Config(format!("rho must be >= 0, got {rho}")));
        }
        if k < 1 || a < 2 {
            return Err(Error::Config(format!("invalid policy shape K={k}, A={a}")));
        }
        let mut rng = rng_from_seed(seed);
        let mut logits = Vec::with_capacity(a + (k - 1) * a * a);
        logits.extend(dirichlet_ones(a, &mut rng).iter().map(|p| p.ln()));
        for _ in 1..k {
            for c in 0..a {
                let base = dirichlet_ones(a, &mut rng);
                let mut row: Vec<f64> = base
                    .iter()
                    .enumerate()
                    .map(|(x, p)| p.ln() + if x == c { rho } else { 0.0 })
                    .collect();
                log_normalize(&mut row);
                logits.extend(row);
            }
        }
        Self::from_flat(k, a, logits)
    }

    pub fn agents(&self) -> usize {
        self.k
    }

    pub fn actions(&self) -> usize {
        self.a
    }

    fn offset(&self, j: usize) -> usize {
        if j == 0 {
            0
        } else {
            self.a + (j - 1) * self.a * self.a
        }
    }

    /// Number of logits owned by agent `j`.
    pub fn block_len(&self, j: usize) -> usize {
        if j == 0 {
            self.a
        } else {
            self.a * self.a
        }
    }

    /// Probability row of agent `j` given upstream action `c` (ignored for agent 0).
    #[inline]
    pub fn row(&self, j: usize, c: usize) -> &[f64] {
        let o = self.offset(j) + if j == 0 { 0 } else { c * self.a };
        &self.probs[o..o + self.a]
    }

    fn logit_row(&self, j: usize, c: usize) -> &[f64] {
        let o = self.offset(j) + if j == 0 { 0 } else { c * self.a };
        &self.logits[o..o + self.a]
    }

    /// `pi_k(. | a_{k-1} = prev)`; `prev` must be given exactly when `k >= 1`.
    pub fn conditional(&self, k: usize, prev: Option<usize>) -> Result<&[f64]> {
        if k >= self.k {
            return Err(Error::Domain(format!("agent {k} out of range [0, {})", self.k)));
        }
        match (k, prev) {
            (0, None) => Ok(self.row(0, 0)),
            (0, Some(_)) => Err(Error::Domain("agent 0 has no upstream action".into())),
            (_, None) => Err(Error::Domain(format!(
                "agent {k} needs the upstream action"
            ))),
            (_, Some(c)) if c >= self.a => Err(Error::Domain(format!(
                "upstream action {c} out of range [0, {})",
                self.a
            ))),
            (_, Some(c)) => Ok(self.row(k, c)),
        }
    }

    /// `pi_k(a_k | a_{k-1})` read off a joint action.
    #[inline]
    pub fn prob_in(&self, k: usize, joint: &[usize]) -> f64 {
        let c = if k == 0 { 0 } else { joint[k - 1] };
        self.row(k, c)[joint[k]]
    }

    /// `log pi_k(a_k | a_{k-1})` computed from the logits.
    pub fn log_prob_in(&self, k: usize, joint: &[usize]) -> f64 {
        let c = if k == 0 { 0 } else { joint[k - 1] };
        let row = self.logit_row(k, c);
        row[joint[k]] - log_sum_exp(row)
    }

    /// Probability of a full joint action.
    pub fn joint_prob(&self, joint: &[usize]) -> f64 {
        (0..self.k).map(|j| self.prob_in(j, joint)).product()
    }

    /// Logits owned by agent `k`.
    pub fn agent_logits(&self, k: usize) -> &[f64] {
        let o = self.offset(k);
        &self.logits[o..o + self.block_len(k)]
    }

    /// A copy with agent `k`'s logits replaced.
    pub fn with_agent_logits(&self, k: usize, logits: &[f64]) -> Result<Self> {
        if k >= self.k || logits.len() != self.block_len(k) {
            return Err(Error::Domain(format!(
                "agent {k} logit block has length {}, got {}",
                self.block_len(k),
                logits.len()
            )));
        }
        let mut next = self.clone();
        let o = next.offset(k);
        next.logits[o..o + logits.len()].copy_from_slice(logits);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("policy logits must be finite".into()));
        }
        let mut probs = logits.to_vec();
        for row in probs.chunks_mut(self.a) {
            softmax_in_place(row);
        }
        next.probs[o..o + logits.len()].copy_from_slice(&probs);
        Ok(next)
    }

    /// A copy taking agent `k`'s parameters from `other`.
    pub fn with_agent_from(&self, k: usize, other: &ChainPolicy) -> Result<Self> {
        self.check_same_shape(other)?;
        self.with_agent_logits(k, other.agent_logits(k))
    }

    pub fn check_same_shape(&self, other: &ChainPolicy) -> Result<()> {
        if self.k != other.k || self.a != other.a {
            return Err(Error::Domain(format!(
                "policy shapes differ: ({}, {}) vs ({}, {})",
                self.k, self.a, other.k, other.a
            )));
        }
        Ok(())
    }

    /// True when every agent's conditional rows coincide (to `tol`).
    pub fn is_factored(&self, tol: f64) -> bool {
        (1..self.k).all(|j| {
            let r0 = self.row(j, 0);
            (1..self.a).all(|c| {
                self.row(j, c)
                    .iter()
                    .zip(r0)
                    .all(|(x, y)| (x - y).abs() <= tol)
            })
        })
    }

    /// Draws a joint action in execution order.
    pub fn sample_joint<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut out = vec![0; self.k];
        self.sample_joint_into(&mut out, rng);
        out
    }

    pub fn sample_joint_into<R: Rng + ?Sized>(&self, out: &mut [usize], rng: &mut R) {
        out[0] = sample_categorical(self.row(0, 0), rng);
        for j in 1..self.k {
            out[j] = sample_categorical(self.row(j, out[j - 1]), rng);
        }
    }

    /// `L` continuations `a_{>k}` of a chain whose agent `k` took `a_k`.
    /// Each returned suffix has `K - k - 1` entries.
    pub fn sample_suffix<R: Rng + ?Sized>(
        &self,
        k: usize,
        a_k: usize,
        count: usize,
        rng: &mut R,
    ) -> Vec<Vec<usize>> {
        (0..count)
            .map(|_| {
                let mut prev = a_k;
                (k + 1..self.k)
                    .map(|j| {
                        prev = sample_categorical(self.row(j, prev), rng);
                        prev
                    })
                    .collect()
            })
            .collect()
    }
}

/// `N` rollouts with rewards and the collection policy's per-agent
/// log-probabilities of the realized actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBatch {
    k: usize,
    a: usize,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    logp: Vec<f64>,
}

impl RolloutBatch {
    pub fn new(
        k: usize,
        a: usize,
        actions: Vec<usize>,
        rewards: Vec<f64>,
        logp: Vec<f64>,
    ) -> Result<Self> {
        let n = rewards.len();
        if actions.len() != n * k || logp.len() != n * k {
            return Err(Error::Domain(format!(
                "batch arrays have inconsistent lengths for N={n}, K={k}"
            )));
        }
        if actions.iter().any(|&x| x >= a) {
            return Err(Error::Domain("batch action out of range".into()));
        }
        if logp.iter().any(|v| !v.is_finite() || *v > 0.0) {
            return Err(Error::Data("log-probabilities must be finite and <= 0".into()));
        }
        Ok(Self {
            k,
            a,
            actions,
            rewards,
            logp,
        })
    }

    /// Samples `n` on-policy rollouts with noisy rewards.
    pub fn collect<R: Rng + ?Sized>(
        model: &RewardModel,
        policy: &ChainPolicy,
        n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if model.agents() != policy.agents() || model.actions() != policy.actions() {
            return Err(Error::Domain("model and policy shapes differ".into()));
        }
        let k = policy.agents();
        let mut actions = vec![0; n * k];
        let mut rewards = Vec::with_capacity(n);
        let mut logp = Vec::with_capacity(n * k);
        for row in actions.chunks_mut(k) {
            policy.sample_joint_into(row, rng);
            rewards.push(model.sample_reward(row, rng)?);
            logp.extend((0..k).map(|j| policy.log_prob_in(j, row)));
        }
        Self::new(k, policy.actions(), actions, rewards, logp)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn agents(&self) -> usize {
        self.k
    }

    pub fn actions(&self) -> usize {
        self.a
    }

    /// Joint action of rollout `n`.
    pub fn joint(&self, n: usize) -> &[usize] {
        &self.actions[n * self.k..(n + 1) * self.k]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// `log mu_k(a_k | a_{k-1})` of rollout `n`.
    pub fn log_prob(&self, n: usize, k: usize) -> f64 {
        self.logp[n * self.k + k]
    }

    pub fn reward_mean(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

/// Inner PPO loop settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    /// Number of ascent steps `M`.
    pub steps: usize,
    /// Step size on the logits.
    pub eta: f64,
    /// Ratio clip `epsilon`; `f64::INFINITY` disables clipping.
    pub clip_eps: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            eta: 0.3,
            clip_eps: 0.2,
        }
    }
}

fn check_ppo_inputs(
    policy: &ChainPolicy,
    k: usize,
    batch: &RolloutBatch,
    advantages: &[f64],
) -> Result<()> {
    if k >= policy.k {
        return Err(Error::Domain(format!("agent {k} out of range")));
    }
    if batch.k != policy.k || batch.a != policy.a {
        return Err(Error::Domain("batch and policy shapes differ".into()));
    }
    if advantages.len() != batch.len() {
        return Err(Error::Domain(format!(
            "{} advantages for a batch of {}",
            advantages.len(),
            batch.len()
        )));
    }
    if advantages.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("NaN advantage".into()));
    }
    Ok(())
}

/// Clipped surrogate `mean_n min(r_n A_n, clip(r_n, 1-eps, 1+eps) A_n)` for
/// agent `k`, with `r_n = pi_k(a_k | a_{k-1}) / mu_k(a_k | a_{k-1})`.
pub fn clipped_surrogate(
    policy: &ChainPolicy,
    k: usize,
    batch: &RolloutBatch,
    advantages: &[f64],
    clip_eps: f64,
) -> Result<f64> {
    check_ppo_inputs(policy, k, batch, advantages)?;
    let n = batch.len();
    let total: f64 = (0..n)
        .map(|i| {
            let joint = batch.joint(i);
            let r = (policy.log_prob_in(k, joint) - batch.log_prob(i, k)).exp();
            let adv = advantages[i];
            let clipped = r.clamp(1.0 - clip_eps, 1.0 + clip_eps);
            (r * adv).min(clipped * adv)
        })
        .sum();
    Ok(total / n as f64)
}

/// Gradient of [`clipped_surrogate`] with respect to agent `k`'s logits.
pub fn clipped_surrogate_grad(
    policy: &ChainPolicy,
    k: usize,
    batch: &RolloutBatch,
    advantages: &[f64],
    clip_eps: f64,
) -> Result<Vec<f64>> {
    check_ppo_inputs(policy, k, batch, advantages)?;
    let a = policy.a;
    let n = batch.len();
    let mut grad = vec![0.0; policy.block_len(k)];
    for i in 0..n {
        let adv = advantages[i];
        if adv == 0.0 {
            continue;
        }
        let joint = batch.joint(i);
        let c = if k == 0 { 0 } else { joint[k - 1] };
        let r = (policy.log_prob_in(k, joint) - batch.log_prob(i, k)).exp();
        let active = (adv > 0.0 && r <= 1.0 + clip_eps) || (adv < 0.0 && r >= 1.0 - clip_eps);
        if !active {
            continue;
        }
        let row = policy.row(k, c);
        let scale = adv * r / n as f64;
        let base = if k == 0 { 0 } else { c * a };
        for (x, p) in row.iter().enumerate() {
            let indicator = if x == joint[k] { 1.0 } else { 0.0 };
            grad[base + x] += scale * (indicator - p);
        }
    }
    Ok(grad)
}

/// `M` plain gradient-ascent steps on agent `k`'s clipped surrogate. Only
/// agent `k`'s logits change.
pub fn ppo_update(
    policy: &ChainPolicy,
    k: usize,
    batch: &RolloutBatch,
    advantages: &[f64],
    cfg: &PpoConfig,
) -> Result<ChainPolicy> {
    if cfg.steps == 0 {
        return Err(Error::Config("PPO step count M must be positive".into()));
    }
    if !(cfg.eta.is_finite() && cfg.eta >= 0.0) || cfg.clip_eps.is_nan() || cfg.clip_eps < 0.0 {
        return Err(Error::Config("invalid PPO step size or clip".into()));
    }
    check_ppo_inputs(policy, k, batch, advantages)?;
    let mut current = policy.clone();
    for _ in 0..cfg.steps {
        let grad = clipped_surrogate_grad(&current, k, batch, advantages, cfg.clip_eps)?;
        if grad.iter().all(|&g| g == 0.0) {
            break;
        }
        let logits: Vec<f64> = current
            .agent_logits(k)
            .iter()
            .zip(&grad)
            .map(|(l, g)| l + cfg.eta * g)
            .collect();
        current = current.with_agent_logits(k, &logits)?;
    }
    Ok(current)
}

/// `max_j max_c sum_a |p_j(a | c) - q_j(a | c)|`.
pub fn total_variation_drift(p: &ChainPolicy, q: &ChainPolicy) -> Result<f64> {
    p.check_same_shape(q)?;
    let mut worst: f64 = 0.0;
    for j in 0..p.k {
        let rows = if j == 0 { 1 } else { p.a };
        for c in 0..rows {
            let d: f64 = p
                .row(j, c)
                .iter()
                .zip(q.row(j, c))
                .map(|(x, y)| (x - y).abs())
                .sum();
            worst = worst.max(d);
        }
    }
    Ok(worst)
}

/// Per-agent version of [`total_variation_drift`].
pub fn agent_drift(p: &ChainPolicy, q: &ChainPolicy, j: usize) -> f64 {
    let rows = if j == 0 { 1 } else { p.a };
    (0..rows)
        .map(|c| {
            p.row(j, c)
                .iter()
                .zip(q.row(j, c))
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn dirichlet_ones<R: Rng + ?Sized>(a: usize, rng: &mut R) -> Vec<f64> {
    let mut w: Vec<f64> = (0..a)
        .map(|_| {
            let e: f64 = rng.sample(Exp1);
            e.max(f64::MIN_POSITIVE)
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn log_normalize(row: &mut [f64]) {
    let z = log_sum_exp(row);
    row.iter_mut().for_each(|v| *v -= z);
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
