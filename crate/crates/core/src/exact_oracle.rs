//! Exact quantities under a Markov-1 chain policy.
//!
//! Conditional expectations of additive-plus-pairwise rewards are computed
//! term by term from multi-step transition tables, which costs `O(K^2 A^2)`
//! per query and scales to `K = 16`. The enumeration-based checks
//! (learnability, factoredness, bias bounds) are limited to small instances.

use crate::error::{Error, Result};
use crate::policy::{agent_drift, total_variation_drift, ChainPolicy};
use crate::reward_env::{pair_count, pair_index, Difference, PairwiseReward, RewardModel};
use crate::ridge::AttributionFit;

/// Largest number of joint actions the learnability routines enumerate.
pub const LEARNABILITY_LIMIT: f64 = 1e6;
/// Largest `log2` of an enumerated configuration count.
pub const ENUMERATION_BITS: f64 = 24.0;
/// Tolerance for sign ties in the factoredness check.
pub const SIGN_TOL: f64 = 1e-12;

/// Marginals and pairwise joints of a chain, optionally anchored at a
/// fixed action of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainLaw {
    k: usize,
    a: usize,
    start: usize,
    marginals: Vec<f64>,
    joints: Vec<f64>,
}

impl ChainLaw {
    /// First agent covered by the law (the anchor, or 0 when unanchored).
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn agents(&self) -> usize {
        self.k
    }

    pub fn actions(&self) -> usize {
        self.a
    }

    /// `P(a_j)`, or `None` for agents upstream of the anchor.
    pub fn marginal(&self, j: usize) -> Option<&[f64]> {
        (j >= self.start && j < self.k).then(|| &self.marginals[j * self.a..(j + 1) * self.a])
    }

    /// `P(a_i = x, a_j = y)` as a row-major `A x A` table, `i < j`.
    pub fn joint(&self, i: usize, j: usize) -> Option<&[f64]> {
        if i >= j || i < self.start || j >= self.k {
            return None;
        }
        let o = pair_index(self.k, i, j) * self.a * self.a;
        Some(&self.joints[o..o + self.a * self.a])
    }
}

/// Multi-step transition tables of a chain policy.
///
/// `forward(i, j)[x * A + y] = P(a_j = y | a_i = x)` for `i < j`.
#[derive(Debug, Clone)]
pub struct ChainKernel {
    k: usize,
    a: usize,
    marginals: Vec<f64>,
    trans: Vec<f64>,
    first: Vec<f64>,
}

impl ChainKernel {
    pub fn new(policy: &ChainPolicy) -> Self {
        let (k, a) = (policy.agents(), policy.actions());
        let aa = a * a;
        let mut trans = vec![0.0; pair_count(k) * aa];
        for i in 0..k {
            for j in i + 1..k {
                let o = pair_index(k, i, j) * aa;
                if j == i + 1 {
                    for x in 0..a {
                        trans[o + x * a..o + (x + 1) * a].copy_from_slice(policy.row(j, x));
                    }
                } else {
                    let prev = pair_index(k, i, j - 1) * aa;
                    for x in 0..a {
                        for z in 0..a {
                            let p = trans[prev + x * a + z];
                            if p == 0.0 {
                                continue;
                            }
                            let step = policy.row(j, z);
                            for y in 0..a {
                                trans[o + x * a + y] += p * step[y];
                            }
                        }
                    }
                }
            }
        }
        let first = policy.row(0, 0).to_vec();
        let mut marginals = vec![0.0; k * a];
        marginals[..a].copy_from_slice(&first);
        for j in 1..k {
            let o = pair_index(k, 0, j) * aa;
            for x in 0..a {
                for y in 0..a {
                    marginals[j * a + y] += first[x] * trans[o + x * a + y];
                }
            }
        }
        Self {
            k,
            a,
            marginals,
            trans,
            first,
        }
    }

    pub fn agents(&self) -> usize {
        self.k
    }

    pub fn actions(&self) -> usize {
        self.a
    }

    /// Unconditional marginal `P(a_j)`.
    pub fn marginal(&self, j: usize) -> &[f64] {
        &self.marginals[j * self.a..(j + 1) * self.a]
    }

    /// `P(a_j = . | a_i = .)` for `i < j`.
    pub fn forward(&self, i: usize, j: usize) -> &[f64] {
        let o = pair_index(self.k, i, j) * self.a * self.a;
        &self.trans[o..o + self.a * self.a]
    }

    /// `P(a_j = . | a_i = x)` for `i < j`.
    #[inline]
    pub fn forward_row(&self, i: usize, j: usize, x: usize) -> &[f64] {
        let o = pair_index(self.k, i, j) * self.a * self.a + x * self.a;
        &self.trans[o..o + self.a]
    }

    /// Law of agent `j >= m` given the realized prefix `a_{<m}`.
    #[inline]
    fn free_law(&self, prefix: &[usize], j: usize) -> &[f64] {
        match prefix.last() {
            None => self.marginal(j),
            Some(&c) => self.forward_row(prefix.len() - 1, j, c),
        }
    }

    /// `E[r(a) | a_{<m} = prefix]` with `m = prefix.len()`; no range checks.
    pub fn conditional_mean_unchecked<R: PairwiseReward + ?Sized>(&self, reward: &R, prefix: &[usize]) -> f64 {
        let (k, a, m) = (self.k, self.a, prefix.len());
        let mut total = 0.0;
        for (j, &x) in prefix.iter().enumerate() {
            total += reward.unary(j, x);
        }
        for j in m..k {
            let law = self.free_law(prefix, j);
            total += law.iter().enumerate().map(|(x, p)| p * reward.unary(j, x)).sum::<f64>();
        }
        if !reward.has_pairwise() {
            return total;
        }
        for i in 0..m {
            for j in i + 1..m {
                total += reward.pairwise(i, j, prefix[i], prefix[j]);
            }
            for j in m..k {
                let law = self.free_law(prefix, j);
                total += law
                    .iter()
                    .enumerate()
                    .map(|(y, p)| p * reward.pairwise(i, j, prefix[i], y))
                    .sum::<f64>();
            }
        }
        for i in m..k {
            let law_i = self.free_law(prefix, i);
            for j in i + 1..k {
                let t = self.forward(i, j);
                for x in 0..a {
                    let px = law_i[x];
                    if px == 0.0 {
                        continue;
                    }
                    let inner: f64 = (0..a).map(|y| t[x * a + y] * reward.pairwise(i, j, x, y)).sum();
                    total += px * inner;
                }
            }
        }
        total
    }

    fn check_prefix<R: PairwiseReward + ?Sized>(&self, reward: &R, prefix: &[usize]) -> Result<()> {
        if reward.agents() != self.k || reward.actions() != self.a {
            return Err(Error::Domain(format!(
                "reward shape ({}, {}) differs from policy shape ({}, {})",
                reward.agents(),
                reward.actions(),
                self.k,
                self.a
            )));
        }
        if prefix.len() > self.k {
            return Err(Error::Domain(format!(
                "prefix of length {} for {} agents",
                prefix.len(),
                self.k
            )));
        }
        if let Some(x) = prefix.iter().find(|&&x| x >= self.a) {
            return Err(Error::Domain(format!("action {x} out of range [0, {})", self.a)));
        }
        Ok(())
    }

    /// `E[r(a) | a_{<m} = prefix]`.
    pub fn conditional_mean<R: PairwiseReward + ?Sized>(&self, reward: &R, prefix: &[usize]) -> Result<f64> {
        self.check_prefix(reward, prefix)?;
        Ok(self.conditional_mean_unchecked(reward, prefix))
    }

    /// `E[r | a_{<=k}] - E[r | a_{<k}]` where `k = prefix.len()`.
    pub fn advantage<R: PairwiseReward + ?Sized>(&self, reward: &R, prefix: &[usize], focal: usize) -> Result<f64> {
        let mut full = prefix.to_vec();
        full.push(focal);
        self.check_prefix(reward, &full)?;
        Ok(self.conditional_mean_unchecked(reward, &full) - self.conditional_mean_unchecked(reward, prefix))
    }

    /// Advantages of every agent along one realized joint action.
    pub fn advantages_along<R: PairwiseReward + ?Sized>(&self, reward: &R, joint: &[usize]) -> Vec<f64> {
        let means: Vec<f64> = (0..=self.k)
            .map(|m| self.conditional_mean_unchecked(reward, &joint[..m]))
            .collect();
        means.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Exact value `E_pi[r]`.
    pub fn value<R: PairwiseReward + ?Sized>(&self, reward: &R) -> f64 {
        self.conditional_mean_unchecked(reward, &[])
    }

    /// The chain law, optionally anchored at agent `anchor.0` taking `anchor.1`.
    pub fn law(&self, anchor: Option<(usize, usize)>) -> Result<ChainLaw> {
        let (k, a) = (self.k, self.a);
        let mut marginals = vec![0.0; k * a];
        let start = match anchor {
            None => {
                marginals.copy_from_slice(&self.marginals);
                0
            }
            Some((s, x)) => {
                if s >= k || x >= a {
                    return Err(Error::Domain(format!("anchor ({s}, {x}) out of range")));
                }
                marginals[s * a + x] = 1.0;
                for j in s + 1..k {
                    marginals[j * a..(j + 1) * a].copy_from_slice(self.forward_row(s, j, x));
                }
                s
            }
        };
        let mut joints = vec![0.0; pair_count(k) * a * a];
        for i in start..k {
            for j in i + 1..k {
                let o = pair_index(k, i, j) * a * a;
                let t = self.forward(i, j);
                for x in 0..a {
                    let px = marginals[i * a + x];
                    for y in 0..a {
                        joints[o + x * a + y] = px * t[x * a + y];
                    }
                }
            }
        }
        Ok(ChainLaw {
            k,
            a,
            start,
            marginals,
            joints,
        })
    }

    /// Agent-0 distribution.
    pub fn first(&self) -> &[f64] {
        &self.first
    }
}

/// The (optionally anchored) marginals and pairwise joints of `policy`.
pub fn chain_law(policy: &ChainPolicy, anchor: Option<(usize, usize)>) -> Result<ChainLaw> {
    ChainKernel::new(policy).law(anchor)
}

/// `E_pi[f(a) | a_{<k} = prefix, a_k = focal]`; without `focal` the agent
/// `k = prefix.len()` is integrated under its conditional.
pub fn exact_conditional_mean<R: PairwiseReward + ?Sized>(
    reward: &R,
    policy: &ChainPolicy,
    prefix: &[usize],
    focal: Option<usize>,
) -> Result<f64> {
    let kernel = ChainKernel::new(policy);
    match focal {
        None => kernel.conditional_mean(reward, prefix),
        Some(x) => {
            let mut full = prefix.to_vec();
            full.push(x);
            kernel.conditional_mean(reward, &full)
        }
    }
}

/// Counterfactual advantage `E[R | a_{<=k}] - E[R | a_{<k}]`.
pub fn seqau_advantage<R: PairwiseReward + ?Sized>(
    reward: &R,
    policy: &ChainPolicy,
    prefix: &[usize],
    focal: usize,
) -> Result<f64> {
    ChainKernel::new(policy).advantage(reward, prefix, focal)
}

fn check_distribution(p: &[f64], a: usize) -> Result<()> {
    if p.len() != a || p.iter().any(|&x| !(x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("reference kernel must be a distribution over {a} actions")));
    }
    Ok(())
}

/// `D*(a_{<k}) = sum_x rho(x) E[R | a_{<k}, a_k = x]`.
pub fn dstar_baseline<R: PairwiseReward + ?Sized>(
    reward: &R,
    policy: &ChainPolicy,
    prefix: &[usize],
    kernel: &[f64],
) -> Result<f64> {
    check_distribution(kernel, policy.actions())?;
    if prefix.len() >= policy.agents() {
        return Err(Error::Domain("prefix leaves no focal agent".into()));
    }
    let chain = ChainKernel::new(policy);
    let mut full = prefix.to_vec();
    full.push(0);
    let mut total = 0.0;
    for (x, &w) in kernel.iter().enumerate() {
        *full.last_mut().unwrap() = x;
        total += w * chain.conditional_mean(reward, &full)?;
    }
    Ok(total)
}

fn guard(count_bits: f64, limit_bits: f64, what: &str) -> Result<()> {
    if count_bits > limit_bits + 1e-9 {
        return Err(Error::Capability(format!(
            "{what} needs 2^{count_bits:.1} enumerated configurations, above the limit 2^{limit_bits:.1}"
        )));
    }
    Ok(())
}

fn bits(free: usize, a: usize) -> f64 {
    free as f64 * (a as f64).log2()
}

/// Calls `visit(joint, probability)` for every joint action.
pub fn enumerate_joint<F: FnMut(&[usize], f64)>(policy: &ChainPolicy, mut visit: F) -> Result<()> {
    guard(bits(policy.agents(), policy.actions()), ENUMERATION_BITS, "joint enumeration")?;
    let mut current = vec![0; policy.agents()];
    walk(policy, 0, 1.0, &mut current, &mut visit);
    Ok(())
}

/// Calls `visit(full_joint, P(a_{>m-1} | a_{m-1}))` for every continuation of
/// `prefix` (the prefix itself is held fixed).
pub fn enumerate_continuations<F: FnMut(&[usize], f64)>(
    policy: &ChainPolicy,
    prefix: &[usize],
    mut visit: F,
) -> Result<()> {
    let (k, a) = (policy.agents(), policy.actions());
    if prefix.len() > k || prefix.iter().any(|&x| x >= a) {
        return Err(Error::Domain("invalid prefix".into()));
    }
    guard(bits(k - prefix.len(), a), ENUMERATION_BITS, "suffix enumeration")?;
    let mut current = vec![0; k];
    current[..prefix.len()].copy_from_slice(prefix);
    walk(policy, prefix.len(), 1.0, &mut current, &mut visit);
    Ok(())
}

/// Calls `visit(prefix, P(prefix))` for every prefix `a_{<m}`.
pub fn enumerate_prefixes<F: FnMut(&[usize], f64)>(policy: &ChainPolicy, m: usize, mut visit: F) -> Result<()> {
    let a = policy.actions();
    if m > policy.agents() {
        return Err(Error::Domain(format!("prefix length {m} exceeds K")));
    }
    guard(bits(m, a), ENUMERATION_BITS, "prefix enumeration")?;
    let mut current = vec![0; m];
    fn rec<F: FnMut(&[usize], f64)>(p: &ChainPolicy, d: usize, prob: f64, cur: &mut [usize], visit: &mut F) {
        if d == cur.len() {
            visit(cur, prob);
            return;
        }
        let row = p.row(d, if d == 0 { 0 } else { cur[d - 1] });
        for x in 0..p.actions() {
            cur[d] = x;
            rec(p, d + 1, prob * row[x], cur, visit);
        }
    }
    rec(policy, 0, 1.0, &mut current, &mut visit);
    Ok(())
}

fn walk<F: FnMut(&[usize], f64)>(p: &ChainPolicy, depth: usize, prob: f64, cur: &mut [usize], visit: &mut F) {
    if depth == cur.len() {
        visit(cur, prob);
        return;
    }
    let row = p.row(depth, if depth == 0 { 0 } else { cur[depth - 1] });
    for x in 0..p.actions() {
        cur[depth] = x;
        walk(p, depth + 1, prob * row[x], cur, visit);
    }
}

/// `max_a |r(a)|` by enumeration.
pub fn sup_norm<R: PairwiseReward + ?Sized>(reward: &R) -> Result<f64> {
    let (k, a) = (reward.agents(), reward.actions());
    guard(bits(k, a), ENUMERATION_BITS, "sup-norm enumeration")?;
    let mut cur = vec![0; k];
    let mut best: f64 = 0.0;
    loop {
        best = best.max(reward.value(&cur).abs());
        // odometer increment
        let mut d = k;
        loop {
            if d == 0 {
                return Ok(best);
            }
            d -= 1;
            cur[d] += 1;
            if cur[d] < a {
                break;
            }
            cur[d] = 0;
        }
    }
}

/// Reference kernel `rho(. | a_{<k})` over the focal action.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceKernel {
    /// The policy's own conditional `pi_k(. | a_{k-1})`.
    Policy,
    Fixed(Vec<f64>),
}

impl ReferenceKernel {
    fn probs<'a>(&'a self, policy: &'a ChainPolicy, prefix: &[usize]) -> Result<&'a [f64]> {
        match self {
            ReferenceKernel::Policy => {
                let k = prefix.len();
                Ok(policy.row(k, if k == 0 { 0 } else { prefix[k - 1] }))
            }
            ReferenceKernel::Fixed(p) => {
                check_distribution(p, policy.actions())?;
                Ok(p)
            }
        }
    }
}

/// Suffix-averaged reward and teammate variance for every focal action at
/// one prefix, computed by enumerating suffixes (noise-free rewards).
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixProfile {
    /// `Q(a_{<k}, x) = E[f | a_{<k}, a_k = x]`.
    pub q: Vec<f64>,
    /// `Var_{a_{>k}}[f | a_{<k}, a_k = x]`.
    pub var: Vec<f64>,
}

/// Numerator and denominator of a learnability ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Learnability {
    pub numerator: f64,
    pub denominator: f64,
}

impl Learnability {
    pub fn value(&self) -> f64 {
        self.numerator / self.denominator
    }
}

impl PrefixProfile {
    pub fn new<R: PairwiseReward + ?Sized>(reward: &R, policy: &ChainPolicy, prefix: &[usize]) -> Result<Self> {
        let (k, a) = (policy.agents(), policy.actions());
        if prefix.len() >= k {
            return Err(Error::Domain("prefix leaves no focal agent".into()));
        }
        guard(bits(k, a), LEARNABILITY_LIMIT.log2(), "learnability")?;
        let mut q = vec![0.0; a];
        let mut var = vec![0.0; a];
        let mut full = prefix.to_vec();
        full.push(0);
        for x in 0..a {
            *full.last_mut().unwrap() = x;
            let (mut m1, mut m2) = (0.0, 0.0);
            enumerate_continuations(policy, &full, |joint, p| {
                let v = reward.value(joint);
                m1 += p * v;
                m2 += p * v * v;
            })?;
            q[x] = m1;
            var[x] = (m2 - m1 * m1).max(0.0);
        }
        Ok(Self { q, var })
    }

    /// `D*` under the reference distribution `rho`.
    pub fn dstar(&self, rho: &[f64]) -> f64 {
        rho.iter().zip(&self.q).map(|(w, q)| w * q).sum()
    }

    /// Squared denominator `E_{x~rho} E[(f - d)^2 | a_{<k}, x]`.
    pub fn spread(&self, rho: &[f64], d: f64) -> f64 {
        rho.iter()
            .enumerate()
            .map(|(x, w)| w * (self.var[x] + (self.q[x] - d).powi(2)))
            .sum()
    }

    /// Pointwise learnability of `R - d` for the move pair `(a1, a2)`.
    pub fn learnability(&self, rho: &[f64], d: f64, a1: usize, a2: usize) -> Learnability {
        Learnability {
            numerator: self.q[a1] - self.q[a2],
            denominator: self.spread(rho, d).sqrt(),
        }
    }
}

/// Learnability of `R - D(a_{<k})` at one prefix.
pub fn pointwise_learnability<R: PairwiseReward + ?Sized>(
    reward: &R,
    policy: &ChainPolicy,
    prefix: &[usize],
    baseline: f64,
    kernel: &ReferenceKernel,
    pair: (usize, usize),
) -> Result<Learnability> {
    let a = policy.actions();
    if pair.0 >= a || pair.1 >= a {
        return Err(Error::Domain("move pair out of range".into()));
    }
    let profile = PrefixProfile::new(reward, policy, prefix)?;
    let rho = kernel.probs(policy, prefix)?;
    Ok(profile.learnability(rho, baseline, pair.0, pair.1))
}

/// Prefix-averaged learnability of agent `k`: both numerator and squared
/// denominator are averaged over the policy's prefix law.
pub fn sequential_learnability<R, D>(
    reward: &R,
    policy: &ChainPolicy,
    k: usize,
    baseline: D,
    kernel: &ReferenceKernel,
    pair: (usize, usize),
) -> Result<Learnability>
where
    R: PairwiseReward + ?Sized,
    D: Fn(&[usize]) -> f64,
{
    let a = policy.actions();
    if k >= policy.agents() || pair.0 >= a || pair.1 >= a {
        return Err(Error::Domain("agent or move pair out of range".into()));
    }
    let mut prefixes = Vec::new();
    enumerate_prefixes(policy, k, |p, w| prefixes.push((p.to_vec(), w)))?;
    let (mut num, mut den2) = (0.0, 0.0);
    for (prefix, w) in prefixes {
        let profile = PrefixProfile::new(reward, policy, &prefix)?;
        let rho = kernel.probs(policy, &prefix)?;
        let l = profile.learnability(rho, baseline(&prefix), pair.0, pair.1);
        num += w * l.numerator;
        den2 += w * l.denominator * l.denominator;
    }
    Ok(Learnability {
        numerator: num,
        denominator: den2.sqrt(),
    })
}

/// Outcome of the baseline grid search.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GridReport {
    /// (prefix, move pair) combinations compared.
    pub cases: usize,
    /// Cases where some grid baseline matched or beat `D*`.
    pub failures: usize,
}

/// Compares `D*` against the grid `D* + s t`, `t = -1, -0.9, ..., 1`, at
/// every prefix of agent `k` and every move pair with positive numerator.
pub fn dstar_grid_optimality<R: PairwiseReward + ?Sized>(
    reward: &R,
    policy: &ChainPolicy,
    k: usize,
    kernel: &ReferenceKernel,
) -> Result<GridReport> {
    let a = policy.actions();
    let mut prefixes = Vec::new();
    enumerate_prefixes(policy, k, |p, _| prefixes.push(p.to_vec()))?;
    let mut report = GridReport::default();
    for prefix in prefixes {
        let profile = PrefixProfile::new(reward, policy, &prefix)?;
        let rho = kernel.probs(policy, &prefix)?;
        let dstar = profile.dstar(rho);
        let scale = 1.0 + profile.q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for a1 in 0..a {
            for a2 in 0..a {
                if profile.q[a1] - profile.q[a2] <= SIGN_TOL {
                    continue;
                }
                report.cases += 1;
                let best = profile.learnability(rho, dstar, a1, a2).value();
                let beaten = (-10..=10).filter(|&t| t != 0).any(|t| {
                    let d = dstar + scale * f64::from(t) / 10.0;
                    profile.learnability(rho, d, a1, a2).value() >= best
                });
                if beaten {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}

fn sign(v: f64) -> i8 {
    if v > SIGN_TOL {
        1
    } else if v < -SIGN_TOL {
        -1
    } else {
        0
    }
}

/// True when `g_k = R - D(a_{<k}, a_k)` ranks every pair of focal actions
/// like the suffix-averaged team reward, at every prefix.
pub fn check_factoredness<R, D>(reward: &R, policy: &ChainPolicy, k: usize, baseline: D) -> Result<bool>
where
    R: PairwiseReward + ?Sized,
    D: Fn(&[usize], usize) -> f64,
{
    let a = policy.actions();
    if k >= policy.agents() {
        return Err(Error::Domain(format!("agent {k} out of range")));
    }
    let chain = ChainKernel::new(policy);
    let mut prefixes = Vec::new();
    enumerate_prefixes(policy, k, |p, _| prefixes.push(p.to_vec()))?;
    for prefix in prefixes {
        let mut full = prefix.clone();
        full.push(0);
        let mut q = vec![0.0; a];
        for x in 0..a {
            *full.last_mut().unwrap() = x;
            q[x] = chain.conditional_mean(reward, &full)?;
        }
        let g: Vec<f64> = (0..a).map(|x| q[x] - baseline(&prefix, x)).collect();
        for x in 0..a {
            for y in x + 1..a {
                if sign(g[x] - g[y]) != sign(q[x] - q[y]) {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Both sides of the two-channel bias bound at one `(a_{<k}, a_k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasBound {
    /// `|A_hat - A|` with both advantages exact under the target policy.
    pub lhs: f64,
    pub rhs: f64,
    /// `E[delta_eps]`, the focal-sensitivity channel.
    pub sensitivity: f64,
    /// `||eps||_inf * max_{x,x'} ||pi_{>k}(.|x) - pi_{>k}(.|x')||_1`.
    pub coupling: f64,
    pub eps_sup: f64,
    /// `max_j ||pi_j - mu_j||_1` between target and logging policies.
    pub drift: f64,
}

/// Evaluates both sides of the general bias bound for the fitted additive
/// reward `fit` at the prefix `a_{<k}` (`k = prefix.len()`) and focal action.
pub fn bias_bound_check<F: PairwiseReward + ?Sized>(
    model: &RewardModel,
    pi: &ChainPolicy,
    mu: &ChainPolicy,
    fit: &F,
    prefix: &[usize],
    focal: usize,
) -> Result<BiasBound> {
    let (k_agents, a) = (pi.agents(), pi.actions());
    let k = prefix.len();
    if k >= k_agents || focal >= a {
        return Err(Error::Domain("prefix leaves no focal agent or focal out of range".into()));
    }
    guard(bits(k_agents, a), ENUMERATION_BITS, "bias-bound enumeration")?;
    let chain = ChainKernel::new(pi);
    let lhs = (chain.advantage(fit, prefix, focal)? - chain.advantage(model, prefix, focal)?).abs();
    let eps = Difference { lhs: fit, rhs: model };
    let eps_sup = sup_norm(&eps)?;

    // suffix laws for each focal action, keyed by the enumerated suffix order
    let mut full = prefix.to_vec();
    full.push(0);
    let mut suffix_probs: Vec<Vec<f64>> = Vec::with_capacity(a);
    let mut sensitivity = 0.0;
    let pk = pi.row(k, if k == 0 { 0 } else { prefix[k - 1] });
    for x in 0..a {
        *full.last_mut().unwrap() = x;
        let mut probs = Vec::new();
        let mut delta_mean = 0.0;
        enumerate_continuations(pi, &full, |joint, p| {
            probs.push(p);
            let mut j = joint.to_vec();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for y in 0..a {
                j[k] = y;
                let e = eps.value(&j);
                lo = lo.min(e);
                hi = hi.max(e);
            }
            delta_mean += p * (hi - lo);
        })?;
        sensitivity += pk[x] * delta_mean;
        suffix_probs.push(probs);
    }
    let mut coupling_l1: f64 = 0.0;
    for x in 0..a {
        for y in x + 1..a {
            let d: f64 = suffix_probs[x]
                .iter()
                .zip(&suffix_probs[y])
                .map(|(p, q)| (p - q).abs())
                .sum();
            coupling_l1 = coupling_l1.max(d);
        }
    }
    let coupling = eps_sup * coupling_l1;
    Ok(BiasBound {
        lhs,
        rhs: sensitivity + coupling,
        sensitivity,
        coupling,
        eps_sup,
        drift: total_variation_drift(pi, mu)?,
    })
}

/// The least-squares additive fit of `model` under a factored logging
/// policy: `phi_k(x) = E_mu[f | a_k = x] - (K - 1)/K * E_mu[f]`.
pub fn additive_projection(model: &RewardModel, mu: &ChainPolicy) -> Result<AttributionFit> {
    if !mu.is_factored(1e-12) {
        return Err(Error::Domain("additive projection needs a factored policy".into()));
    }
    let (k, a) = (mu.agents(), mu.actions());
    let chain = ChainKernel::new(mu);
    let total = chain.value(model);
    let mut phi = vec![0.0; k * a];
    for j in 0..k {
        for x in 0..a {
            // E[f | a_j = x] under a product law: fix a_j, integrate the rest
            let marg: Vec<Vec<f64>> = (0..k)
                .map(|i| {
                    if i == j {
                        (0..a).map(|y| f64::from(u8::from(y == x))).collect()
                    } else {
                        chain.marginal(i).to_vec()
                    }
                })
                .collect();
            phi[j * a + x] = product_mean(model, &marg) - (k as f64 - 1.0) / k as f64 * total;
        }
    }
    AttributionFit::from_phi(k, a, phi)
}

fn product_mean<R: PairwiseReward + ?Sized>(reward: &R, marg: &[Vec<f64>]) -> f64 {
    let k = marg.len();
    let mut total = 0.0;
    for (i, m) in marg.iter().enumerate() {
        total += m.iter().enumerate().map(|(x, p)| p * reward.unary(i, x)).sum::<f64>();
    }
    if reward.has_pairwise() {
        for i in 0..k {
            for j in i + 1..k {
                for (x, px) in marg[i].iter().enumerate() {
                    for (y, py) in marg[j].iter().enumerate() {
                        total += px * py * reward.pairwise(i, j, x, y);
                    }
                }
            }
        }
    }
    total
}

/// Factored-policy bias check for agent `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredBias {
    /// `max_x |E_pi[eps | a_k = x] - E_pi[eps]|`.
    pub lhs: f64,
    /// `2 (K - 1) drift ||eps||_inf`.
    pub rhs: f64,
    /// `2 ||eps||_inf sum_{j != k} ||pi_j - mu_j||_1`.
    pub rhs_tight: f64,
    pub eps_sup: f64,
    pub drift: f64,
}

/// Bias of the additive projection fitted under `mu` when advantages are
/// taken under `pi`, both factored, marginalizing over the prefix.
pub fn factored_bias_check(model: &RewardModel, pi: &ChainPolicy, mu: &ChainPolicy, k: usize) -> Result<FactoredBias> {
    if !pi.is_factored(1e-12) {
        return Err(Error::Domain("factored bias check needs a factored target policy".into()));
    }
    pi.check_same_shape(mu)?;
    let (k_agents, a) = (pi.agents(), pi.actions());
    if k >= k_agents {
        return Err(Error::Domain(format!("agent {k} out of range")));
    }
    let fit = additive_projection(model, mu)?;
    let eps = Difference { lhs: &fit, rhs: model };
    let eps_sup = sup_norm(&eps)?;
    let chain = ChainKernel::new(pi);
    let base: Vec<Vec<f64>> = (0..k_agents).map(|i| chain.marginal(i).to_vec()).collect();
    let overall = product_mean(&eps, &base);
    let mut lhs: f64 = 0.0;
    for x in 0..a {
        let mut marg = base.clone();
        marg[k] = (0..a).map(|y| f64::from(u8::from(y == x))).collect();
        lhs = lhs.max((product_mean(&eps, &marg) - overall).abs());
    }
    let drifts: Vec<f64> = (0..k_agents).map(|j| agent_drift(pi, mu, j)).collect();
    let drift = drifts.iter().cloned().fold(0.0, f64::max);
    let others: f64 = drifts.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, d)| d).sum();
    Ok(FactoredBias {
        lhs,
        rhs: 2.0 * (k_agents as f64 - 1.0) * drift * eps_sup,
        rhs_tight: 2.0 * eps_sup * others,
        eps_sup,
        drift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    // brute force E[r | a_{<m} = prefix] over the explicit joint law
    fn brute_mean<R: PairwiseReward>(reward: &R, policy: &ChainPolicy, prefix: &[usize]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        enumerate_joint(policy, |a, p| {
            if a[..prefix.len()] == *prefix {
                num += p * reward.value(a);
                den += p;
            }
        })
        .unwrap();
        num / den
    }

    fn random_fit(seed: u64, k: usize, a: usize) -> AttributionFit {
        let mut rng = rng_from_seed(seed);
        let phi = (0..k * a).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        AttributionFit::from_phi(k, a, phi).unwrap()
    }

    fn random_factored(seed: u64, k: usize, a: usize) -> ChainPolicy {
        let mut rng = rng_from_seed(seed);
        let marg: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let w: Vec<f64> = (0..a).map(|_| 0.05 + rng.random::<f64>()).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|x| x / s).collect()
            })
            .collect();
        ChainPolicy::factored(&marg).unwrap()
    }

    #[test]
    fn uniform_chain_has_uniform_marginals() {
        let law = chain_law(&ChainPolicy::uniform(5, 4).unwrap(), None).unwrap();
        for j in 0..5 {
            assert!(law.marginal(j).unwrap().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn anchored_deterministic_chain_is_point_mass() {
        let big = 80.0;
        let mut cond = Vec::new();
        for _ in 1..4 {
            for c in 0..3 {
                cond.extend((0..3).map(|x| if x == (c + 2) % 3 { big } else { 0.0 }));
            }
        }
        let p = ChainPolicy::from_logits(4, 3, vec![0.0; 3], cond).unwrap();
        let law = chain_law(&p, Some((1, 0))).unwrap();
        assert!(law.marginal(0).is_none());
        let expect = [(1, 0), (2, 2), (3, 1)];
        for (j, x) in expect {
            let m = law.marginal(j).unwrap();
            assert!((m[x] - 1.0).abs() < 1e-12, "agent {j}: {m:?}");
        }
        assert!(chain_law(&p, Some((4, 0))).is_err());
    }

    #[test]
    fn joints_match_enumeration_and_marginalize() {
        for seed in 0..20 {
            let p = ChainPolicy::init(seed, 3, 2, 1.0).unwrap();
            let law = chain_law(&p, None).unwrap();
            let mut joints = vec![vec![0.0; 4]; 3];
            let mut marg = vec![vec![0.0; 2]; 3];
            enumerate_joint(&p, |a, w| {
                for j in 0..3 {
                    marg[j][a[j]] += w;
                }
                for (slot, (i, j)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
                    joints[slot][a[i] * 2 + a[j]] += w;
                }
            })
            .unwrap();
            for (slot, (i, j)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
                let t = law.joint(i, j).unwrap();
                for c in 0..4 {
                    assert!((t[c] - joints[slot][c]).abs() < 1e-12);
                }
                for x in 0..2 {
                    let row: f64 = t[x * 2..x * 2 + 2].iter().sum();
                    let col: f64 = t[x] + t[2 + x];
                    assert!((row - law.marginal(i).unwrap()[x]).abs() < 1e-12);
                    assert!((col - law.marginal(j).unwrap()[x]).abs() < 1e-12);
                }
            }
            for j in 0..3 {
                for x in 0..2 {
                    assert!((law.marginal(j).unwrap()[x] - marg[j][x]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn full_prefix_returns_mean_reward() {
        let m = RewardModel::sample(1, 4, 3, 0.7, 0.5).unwrap();
        let p = ChainPolicy::init(1, 4, 3, 1.0).unwrap();
        let a = [2, 0, 1, 1];
        let v = exact_conditional_mean(&m, &p, &a, None).unwrap();
        assert!((v - m.mean_reward(&a).unwrap()).abs() < 1e-12);
        assert!(exact_conditional_mean(&m, &p, &a, Some(0)).is_err());
        assert!(exact_conditional_mean(&m, &p, &[0, 5], None).is_err());
    }

    #[test]
    fn additive_factored_advantage_is_aristocrat() {
        let m = RewardModel::sample(2, 4, 3, 0.0, 0.5).unwrap();
        let p = random_factored(2, 4, 3);
        let prefix = [1, 2];
        for x in 0..3 {
            let adv = seqau_advantage(&m, &p, &prefix, x).unwrap();
            let row = p.conditional(2, Some(2)).unwrap();
            let mean: f64 = (0..3).map(|y| row[y] * m.phi(2)[y]).sum();
            assert!((adv - (m.phi(2)[x] - mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_means_match_enumeration() {
        for seed in 0..50 {
            let k = 2 + (seed as usize % 4);
            let a = 2 + (seed as usize % 3);
            let m = RewardModel::sample(seed, k, a, 0.8, 0.5).unwrap();
            let p = ChainPolicy::init(seed + 100, k, a, (seed % 5) as f64).unwrap();
            let kernel = ChainKernel::new(&p);
            let mut rng = rng_from_seed(seed);
            let joint = p.sample_joint(&mut rng);
            for len in 0..=k {
                let exact = kernel.conditional_mean(&m, &joint[..len]).unwrap();
                let brute = brute_mean(&m, &p, &joint[..len]);
                assert!((exact - brute).abs() < 1e-10, "seed {seed} len {len}: {exact} vs {brute}");
            }
        }
    }

    #[test]
    fn advantage_matches_enumeration_and_tower() {
        for seed in 0..20 {
            let m = RewardModel::sample(seed, 3, 3, 1.0, 0.5).unwrap();
            let p = ChainPolicy::init(seed, 3, 3, 2.0).unwrap();
            let kernel = ChainKernel::new(&p);
            for k in 0..3 {
                let mut prefixes = Vec::new();
                enumerate_prefixes(&p, k, |x, _| prefixes.push(x.to_vec())).unwrap();
                for prefix in prefixes {
                    let row = p.row(k, if k == 0 { 0 } else { prefix[k - 1] });
                    let mut tower = 0.0;
                    for x in 0..3 {
                        let adv = kernel.advantage(&m, &prefix, x).unwrap();
                        let mut full = prefix.clone();
                        full.push(x);
                        let brute = brute_mean(&m, &p, &full) - brute_mean(&m, &p, &prefix);
                        assert!((adv - brute).abs() < 1e-10);
                        tower += row[x] * adv;
                    }
                    assert!(tower.abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn symmetric_focal_has_zero_advantage() {
        // agent 1's component is constant, so every focal action matches the average
        let m = RewardModel::from_tables(2, 2, vec![1.0, -1.0, 3.0, 3.0], vec![0.0; 4], 0.0, 0.0).unwrap();
        let p = ChainPolicy::init(4, 2, 2, 0.0).unwrap();
        for x in 0..2 {
            assert!(seqau_advantage(&m, &p, &[1], x).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn advantages_along_matches_pointwise() {
        let m = RewardModel::sample(3, 5, 3, 0.5, 0.5).unwrap();
        let p = ChainPolicy::init(3, 5, 3, 1.0).unwrap();
        let kernel = ChainKernel::new(&p);
        let joint = [0, 2, 1, 1, 0];
        let along = kernel.advantages_along(&m, &joint);
        for k in 0..5 {
            let direct = seqau_advantage(&m, &p, &joint[..k], joint[k]).unwrap();
            assert!((along[k] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn dstar_examples() {
        let m = RewardModel::sample(5, 2, 3, 0.6, 0.0).unwrap();
        let p = ChainPolicy::init(5, 2, 3, 1.0).unwrap();
        let prefix = [1];
        let pik = p.conditional(1, Some(1)).unwrap().to_vec();
        let d = dstar_baseline(&m, &p, &prefix, &pik).unwrap();
        let v = exact_conditional_mean(&m, &p, &prefix, None).unwrap();
        assert!((d - v).abs() < 1e-12);
        let point = dstar_baseline(&m, &p, &prefix, &[0.0, 1.0, 0.0]).unwrap();
        assert!((point - exact_conditional_mean(&m, &p, &prefix, Some(1)).unwrap()).abs() < 1e-12);
        let third = 1.0 / 3.0;
        let uni = dstar_baseline(&m, &p, &prefix, &[third; 3]).unwrap();
        // agent 1 is last, so each focal conditional is the full reward
        let hand: f64 = (0..3).map(|x| m.mean_reward(&[1, x]).unwrap()).sum::<f64>() / 3.0;
        assert!((uni - hand).abs() < 1e-12);
        assert!(matches!(dstar_baseline(&m, &p, &prefix, &[0.5, 0.6, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn profile_spread_matches_direct_second_moment() {
        let m = RewardModel::sample(8, 4, 2, 1.0, 0.0).unwrap();
        let p = ChainPolicy::init(8, 4, 2, 1.0).unwrap();
        let prefix = [1, 0];
        let profile = PrefixProfile::new(&m, &p, &prefix).unwrap();
        let rho = p.conditional(2, Some(0)).unwrap();
        for d in [-1.0, 0.0, 0.7] {
            // E_{x ~ rho} E[(f - d)^2 | prefix, x] by enumeration
            let mut direct = 0.0;
            for x in 0..2 {
                enumerate_continuations(&p, &[1, 0, x], |a, w| {
                    direct += rho[x] * w * (m.value(a) - d).powi(2);
                })
                .unwrap();
            }
            assert!((profile.spread(rho, d) - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn learnability_numerator_ignores_baseline_and_is_antisymmetric() {
        let m = RewardModel::sample(9, 3, 3, 0.5, 0.0).unwrap();
        let p = ChainPolicy::init(9, 3, 3, 1.0).unwrap();
        let kernel = ReferenceKernel::Policy;
        let l1 = sequential_learnability(&m, &p, 1, |_| 0.0, &kernel, (0, 2)).unwrap();
        let l2 = sequential_learnability(&m, &p, 1, |x| x[0] as f64 * 3.0, &kernel, (0, 2)).unwrap();
        let l3 = sequential_learnability(&m, &p, 1, |_| 0.0, &kernel, (2, 0)).unwrap();
        assert!((l1.numerator - l2.numerator).abs() < 1e-12);
        assert!((l1.value() + l3.value()).abs() < 1e-12);
        let pw = pointwise_learnability(&m, &p, &[2], 0.3, &kernel, (1, 0)).unwrap();
        let pw_swapped = pointwise_learnability(&m, &p, &[2], 0.3, &kernel, (0, 1)).unwrap();
        assert!((pw.value() + pw_swapped.value()).abs() < 1e-12);
    }

    #[test]
    fn dstar_wins_the_grid() {
        for seed in 0..10 {
            let m = RewardModel::sample(seed, 2, 2, 1.0, 0.0).unwrap();
            let p = ChainPolicy::init(seed, 2, 2, 1.0).unwrap();
            for k in 0..2 {
                let r = dstar_grid_optimality(&m, &p, k, &ReferenceKernel::Policy).unwrap();
                assert_eq!(r.failures, 0);
                let r = dstar_grid_optimality(&m, &p, k, &ReferenceKernel::Fixed(vec![0.5, 0.5])).unwrap();
                assert_eq!(r.failures, 0);
            }
        }
    }

    #[test]
    fn averaged_learnability_peaks_at_dstar() {
        let m = RewardModel::sample(10, 3, 2, 1.0, 0.0).unwrap();
        let p = ChainPolicy::init(10, 3, 2, 1.0).unwrap();
        let kernel = ReferenceKernel::Policy;
        let chain = ChainKernel::new(&p);
        let dstar = |x: &[usize]| chain.conditional_mean(&m, x).unwrap();
        let profile = PrefixProfile::new(&m, &p, &[0, 0]).unwrap();
        let pair = if profile.q[0] > profile.q[1] { (0, 1) } else { (1, 0) };
        let best = sequential_learnability(&m, &p, 2, dstar, &kernel, pair).unwrap();
        if best.numerator > 0.0 {
            for shift in [-0.5, -0.1, 0.1, 0.5] {
                let other = sequential_learnability(&m, &p, 2, |x| dstar(x) + shift, &kernel, pair).unwrap();
                assert!(other.value() < best.value());
            }
        }
    }

    #[test]
    fn factoredness_examples() {
        let m = RewardModel::sample(11, 2, 3, 1.0, 0.0).unwrap();
        let p = ChainPolicy::init(11, 2, 3, 1.0).unwrap();
        assert!(check_factoredness(&m, &p, 1, |_, _| 0.0).unwrap());
        assert!(check_factoredness(&m, &p, 1, |x, _| (x[0] as f64).sin() * 10.0).unwrap());
        // baseline depending on the focal action: push the best action to the bottom
        let chain = ChainKernel::new(&p);
        let flip = |prefix: &[usize], x: usize| {
            let mut q = [0.0; 3];
            for y in 0..3 {
                q[y] = chain.conditional_mean(&m, &[prefix[0], y]).unwrap();
            }
            let top = (0..3).max_by(|&i, &j| q[i].total_cmp(&q[j])).unwrap();
            if x == top {
                100.0
            } else {
                0.0
            }
        };
        assert!(!check_factoredness(&m, &p, 1, flip).unwrap());
    }

    #[test]
    fn exact_additive_fit_has_no_bias() {
        let m = RewardModel::sample(12, 3, 2, 0.0, 0.5).unwrap();
        // gauge-shifted copy of the true components
        let mut phi = m.phi_table().to_vec();
        phi[0] += 1.5;
        phi[1] += 1.5;
        phi[4] -= 1.5;
        phi[5] -= 1.5;
        let fit = AttributionFit::from_phi(3, 2, phi).unwrap();
        let pi = ChainPolicy::init(12, 3, 2, 2.0).unwrap();
        let b = bias_bound_check(&m, &pi, &pi, &fit, &[1], 0).unwrap();
        assert!(b.lhs < 1e-12);
    }

    #[test]
    fn factored_policy_has_no_coupling_channel() {
        let m = RewardModel::sample(13, 3, 2, 0.0, 0.5).unwrap();
        let pi = random_factored(13, 3, 2);
        let fit = random_fit(13, 3, 2);
        for k in 0..3 {
            let prefix: Vec<usize> = vec![1; k];
            let b = bias_bound_check(&m, &pi, &pi, &fit, &prefix, 0).unwrap();
            assert!(b.coupling.abs() < 1e-12);
            assert!(b.lhs <= b.rhs + 1e-9);
        }
    }

    #[test]
    fn general_bias_bound_on_random_instances() {
        for seed in 0..100 {
            let m = RewardModel::sample(seed, 3, 2, 0.5 + (seed % 3) as f64 * 0.25, 0.5).unwrap();
            let pi = ChainPolicy::init(seed, 3, 2, (seed % 4) as f64).unwrap();
            let fit = random_fit(seed + 1000, 3, 2);
            for k in 0..3 {
                let prefix: Vec<usize> = (0..k).map(|j| (seed as usize + j) % 2).collect();
                for x in 0..2 {
                    let b = bias_bound_check(&m, &pi, &pi, &fit, &prefix, x).unwrap();
                    assert!(b.lhs <= b.rhs + 1e-9, "seed {seed}: {b:?}");
                }
            }
        }
    }

    #[test]
    fn projection_residual_is_centered_per_agent() {
        let m = RewardModel::sample(14, 3, 3, 1.0, 0.5).unwrap();
        let mu = random_factored(14, 3, 3);
        let fit = additive_projection(&m, &mu).unwrap();
        let eps = Difference { lhs: &fit, rhs: &m };
        let chain = ChainKernel::new(&mu);
        for j in 0..3 {
            for x in 0..3 {
                let mut marg: Vec<Vec<f64>> = (0..3).map(|i| chain.marginal(i).to_vec()).collect();
                marg[j] = (0..3).map(|y| f64::from(u8::from(y == x))).collect();
                assert!(product_mean(&eps, &marg).abs() < 1e-12);
            }
        }
        assert!(additive_projection(&m, &ChainPolicy::init(1, 3, 3, 1.0).unwrap()).is_err());
    }

    #[test]
    fn factored_bias_bound_on_random_instances() {
        for seed in 0..100 {
            let m = RewardModel::sample(seed, 3, 3, 1.0, 0.5).unwrap();
            let mu = random_factored(seed, 3, 3);
            let pi = random_factored(seed + 500, 3, 3);
            for k in 0..3 {
                let b = factored_bias_check(&m, &pi, &mu, k).unwrap();
                assert!(b.lhs <= b.rhs_tight + 1e-12 && b.rhs_tight <= b.rhs + 1e-12, "{b:?}");
            }
            // no drift, no bias
            let b = factored_bias_check(&m, &mu, &mu, 0).unwrap();
            assert!(b.lhs < 1e-12);
        }
    }

    #[test]
    fn capability_guards() {
        let p = ChainPolicy::uniform(13, 4).unwrap();
        assert!(matches!(enumerate_joint(&p, |_, _| {}), Err(Error::Capability(_))));
        let m = RewardModel::sample(0, 11, 4, 0.5, 0.0).unwrap();
        let p = ChainPolicy::uniform(11, 4).unwrap();
        assert!(matches!(PrefixProfile::new(&m, &p, &[]), Err(Error::Capability(_))));
    }

    proptest! {
        #[test]
        fn tower_identity_holds(seed in 0u64..1000, k in 0usize..5, rho in 0.0f64..6.0, lam in 0.0f64..1.0) {
            let m = RewardModel::sample(seed, 5, 4, lam, 0.5).unwrap();
            let p = ChainPolicy::init(seed, 5, 4, rho).unwrap();
            let joint = p.sample_joint(&mut rng_from_seed(seed));
            let kernel = ChainKernel::new(&p);
            let row = p.row(k, if k == 0 { 0 } else { joint[k - 1] });
            let tower: f64 = (0..4).map(|x| row[x] * kernel.advantage(&m, &joint[..k], x).unwrap()).sum();
            prop_assert!(tower.abs() < 1e-10);
        }
    }
}
