//! Synthetic team rewards: per-agent additive tables plus pairwise
//! interactions, observed with Gaussian noise.
//!
//! The conditional mean of the team reward is
//!
//! ```text
//! f(a) = sum_k phi_k(a_k) + lambda_int * sum_{k<l} g_kl(a_k, a_l)
//! ```
//!
//! and an observation is `f(a) + sigma * Z` with `Z ~ N(0, 1)`. Rewards are
//! not clipped.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Largest joint-action space (in bits, `K * log2(A)`) that is enumerated.
pub const MAX_ENUMERATION_BITS: f64 = 24.0;

/// A team reward made of per-agent and pairwise terms.
///
/// Implemented by the true [`RewardModel`], by the ridge-fitted additive
/// approximation, and by residuals between the two, so that the exact
/// oracle can take conditional expectations of any of them.
pub trait PairwiseReward {
    fn agents(&self) -> usize;
    fn actions(&self) -> usize;
    /// Per-agent term for agent `k` taking action `a`.
    fn unary(&self, k: usize, a: usize) -> f64;
    /// Interaction term for agents `i < j`, already scaled by its strength.
    fn pairwise(&self, i: usize, j: usize, ai: usize, aj: usize) -> f64;
    /// False when every pairwise term is identically zero.
    fn has_pairwise(&self) -> bool;

    /// Evaluates the reward at a joint action without range checks.
    fn value(&self, a: &[usize]) -> f64 {
        let k = self.agents();
        let mut v = 0.0;
        for i in 0..k {
            v += self.unary(i, a[i]);
        }
        if self.has_pairwise() {
            for i in 0..k {
                for j in i + 1..k {
                    v += self.pairwise(i, j, a[i], a[j]);
                }
            }
        }
        v
    }
}

/// `value(a) = lhs(a) - rhs(a)` for two rewards of the same shape.
pub struct Difference<'a, L: ?Sized, R: ?Sized> {
    pub lhs: &'a L,
    pub rhs: &'a R,
}

impl<L: PairwiseReward + ?Sized, R: PairwiseReward + ?Sized> PairwiseReward for Difference<'_, L, R> {
    fn agents(&self) -> usize {
        self.lhs.agents()
    }
    fn actions(&self) -> usize {
        self.lhs.actions()
    }
    fn unary(&self, k: usize, a: usize) -> f64 {
        self.lhs.unary(k, a) - self.rhs.unary(k, a)
    }
    fn pairwise(&self, i: usize, j: usize, ai: usize, aj: usize) -> f64 {
        self.lhs.pairwise(i, j, ai, aj) - self.rhs.pairwise(i, j, ai, aj)
    }
    fn has_pairwise(&self) -> bool {
        self.lhs.has_pairwise() || self.rhs.has_pairwise()
    }
}

/// Index of the unordered pair `(i, j)`, `i < j`, among `k` agents.
pub fn pair_index(k: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < k);
    i * k - i * (i + 1) / 2 + (j - i - 1)
}

pub fn pair_count(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    k: usize,
    a: usize,
    /// `phi[k * A + a]`
    phi: Vec<f64>,
    /// `g[pair_index(i, j) * A * A + ai * A + aj]`
    g: Vec<f64>,
    lambda_int: f64,
    sigma: f64,
}

impl RewardModel {
    /// Builds a model from explicit tables.
    pub fn from_tables(
        k: usize,
        a: usize,
        phi: Vec<f64>,
        g: Vec<f64>,
        lambda_int: f64,
        sigma: f64,
    ) -> Result<Self> {
        check_shape(k, a, lambda_int, sigma)?;
        if phi.len() != k * a {
            return Err(Error::Config(format!(
                "phi has {} entries, expected {}",
                phi.len(),
                k * a
            )));
        }
        if g.len() != pair_count(k) * a * a {
            return Err(Error::Config(format!(
                "g has {} entries, expected {}",
                g.len(),
                pair_count(k) * a * a
            )));
        }
        if phi.iter().chain(g.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("reward tables must be finite".into()));
        }
        Ok(Self {
            k,
            a,
            phi,
            g,
            lambda_int,
            sigma,
        })
    }

    /// Draws a model deterministically from `seed`.
    ///
    /// `phi` entries are i.i.d. standard normal. `g` entries are drawn
    /// i.i.d. standard normal and then rescaled by one common factor so that,
    /// under uniformly random joint actions, the pairwise part has exactly
    /// the variance of the additive part. At `lambda_int = 1` the two parts
    /// therefore contribute equal reward variance.
    pub fn sample(seed: u64, k: usize, a: usize, lambda_int: f64, sigma: f64) -> Result<Self> {
        check_shape(k, a, lambda_int, sigma)?;
        let mut rng = rng_from_seed(seed);
        let phi: Vec<f64> = (0..k * a).map(|_| rng.sample(StandardNormal)).collect();
        let mut g: Vec<f64> = (0..pair_count(k) * a * a)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let mut model = Self {
            k,
            a,
            phi,
            g: Vec::new(),
            lambda_int,
            sigma,
        };
        if k >= 2 {
            // nominal scale for unit-variance entries; the exact match below
            // corrects for the finite table draw
            let nominal = (2.0 / (k as f64 - 1.0)).sqrt();
            g.iter_mut().for_each(|v| *v *= nominal);
            model.g = g;
            let additive = model.additive_variance_uniform();
            let pairwise = model.pairwise_variance_uniform();
            if pairwise > 0.0 {
                let scale = (additive / pairwise).sqrt();
                model.g.iter_mut().for_each(|v| *v *= scale);
            }
        }
        Ok(model)
    }

    pub fn agents(&self) -> usize {
        self.k
    }

    pub fn actions(&self) -> usize {
        self.a
    }

    pub fn lambda_int(&self) -> f64 {
        self.lambda_int
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn phi(&self, k: usize) -> &[f64] {
        &self.phi[k * self.a..(k + 1) * self.a]
    }

    pub fn phi_table(&self) -> &[f64] {
        &self.phi
    }

    pub fn g_table(&self) -> &[f64] {
        &self.g
    }

    /// The unscaled interaction table of the pair `i < j`, row-major in `(a_i, a_j)`.
    pub fn g(&self, i: usize, j: usize) -> &[f64] {
        let aa = self.a * self.a;
        let p = pair_index(self.k, i, j);
        &self.g[p * aa..(p + 1) * aa]
    }

    /// Same tables with a different interaction strength.
    pub fn with_lambda_int(&self, lambda_int: f64) -> Result<Self> {
        check_shape(self.k, self.a, lambda_int, self.sigma)?;
        Ok(Self {
            lambda_int,
            ..self.clone()
        })
    }

    /// Same tables with a different noise level.
    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        check_shape(self.k, self.a, self.lambda_int, sigma)?;
        Ok(Self {
            sigma,
            ..self.clone()
        })
    }

    pub fn check_action(&self, a: &[usize]) -> Result<()> {
        if a.len() != self.k {
            return Err(Error::Domain(format!(
                "joint action has {} entries, expected {}",
                a.len(),
                self.k
            )));
        }
        if let Some((i, &x)) = a.iter().enumerate().find(|(_, &x)| x >= self.a) {
            return Err(Error::Domain(format!(
                "action {x} of agent {i} out of range [0, {})",
                self.a
            )));
        }
        Ok(())
    }

    /// Conditional mean `f(a)`.
    pub fn mean_reward(&self, a: &[usize]) -> Result<f64> {
        self.check_action(a)?;
        Ok(self.value(a))
    }

    /// Additive part `sum_k phi_k(a_k)`.
    pub fn additive_part(&self, a: &[usize]) -> f64 {
        (0..self.k).map(|i| self.phi[i * self.a + a[i]]).sum()
    }

    /// Unscaled pairwise part `sum_{k<l} g_kl(a_k, a_l)`.
    pub fn pairwise_part(&self, a: &[usize]) -> f64 {
        let mut v = 0.0;
        for i in 0..self.k {
            for j in i + 1..self.k {
                v += self.g(i, j)[a[i] * self.a + a[j]];
            }
        }
        v
    }

    /// One noisy observation `f(a) + sigma * Z`.
    pub fn sample_reward<R: Rng + ?Sized>(&self, a: &[usize], rng: &mut R) -> Result<f64> {
        let mean = self.mean_reward(a)?;
        let z: f64 = rng.sample(StandardNormal);
        Ok(mean + self.sigma * z)
    }

    /// Exact variance of the additive part under uniform joint actions.
    pub fn additive_variance_uniform(&self) -> f64 {
        (0..self.k).map(|i| population_variance(self.phi(i))).sum()
    }

    /// Exact variance of the unscaled pairwise part under uniform joint actions.
    ///
    /// Two pair terms covary only through a shared agent, via their
    /// one-variable marginal means.
    pub fn pairwise_variance_uniform(&self) -> f64 {
        let (k, a) = (self.k, self.a);
        if k < 2 {
            return 0.0;
        }
        let af = a as f64;
        // main[p][0] = mean over a_j as a function of a_i; main[p][1] = mean over a_i
        let mut pairs = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                let t = self.g(i, j);
                let row: Vec<f64> = (0..a)
                    .map(|x| (0..a).map(|y| t[x * a + y]).sum::<f64>() / af)
                    .collect();
                let col: Vec<f64> = (0..a)
                    .map(|y| (0..a).map(|x| t[x * a + y]).sum::<f64>() / af)
                    .collect();
                pairs.push((i, j, population_variance(t), row, col));
            }
        }
        let mut var = 0.0;
        for (p, (i, j, v, row_p, col_p)) in pairs.iter().enumerate() {
            var += v;
            for (i2, j2, _, row_q, col_q) in pairs.iter().skip(p + 1) {
                let cov = match (i == i2, i == j2, j == i2, j == j2) {
                    (true, _, _, _) => covariance(row_p, row_q),
                    (_, true, _, _) => covariance(row_p, col_q),
                    (_, _, true, _) => covariance(col_p, row_q),
                    (_, _, _, true) => covariance(col_p, col_q),
                    _ => 0.0,
                };
                var += 2.0 * cov;
            }
        }
        var
    }

    /// `max_a f(a)` by exhaustive enumeration.
    pub fn optimal_value(&self) -> Result<f64> {
        self.optimal_action().map(|(_, v)| v)
    }

    /// A maximizing joint action and its value.
    pub fn optimal_action(&self) -> Result<(Vec<usize>, f64)> {
        let bits = self.k as f64 * (self.a as f64).log2();
        if bits > MAX_ENUMERATION_BITS + 1e-9 {
            return Err(Error::Capability(format!(
                "A^K = {}^{} exceeds the enumeration limit of 2^{}; regret is unavailable at this K",
                self.a, self.k, MAX_ENUMERATION_BITS
            )));
        }
        let mut best = (vec![0; self.k], f64::NEG_INFINITY);
        let mut current = vec![0; self.k];
        self.search(0, 0.0, &mut current, &mut best);
        Ok(best)
    }

    // depth-first enumeration with running partial sums
    fn search(&self, depth: usize, partial: f64, current: &mut [usize], best: &mut (Vec<usize>, f64)) {
        if depth == self.k {
            if partial > best.1 {
                best.0.copy_from_slice(current);
                best.1 = partial;
            }
            return;
        }
        for x in 0..self.a {
            let mut v = partial + self.phi[depth * self.a + x];
            if self.lambda_int != 0.0 {
                for i in 0..depth {
                    v += self.lambda_int * self.g(i, depth)[current[i] * self.a + x];
                }
            }
            current[depth] = x;
            self.search(depth + 1, v, current, best);
        }
    }

    /// `max_a |f(a)|`, used as the reward bound in the theorem checks.
    pub fn max_abs_mean(&self) -> Result<f64> {
        let neg = Self {
            phi: self.phi.iter().map(|v| -v).collect(),
            g: self.g.iter().map(|v| -v).collect(),
            ..self.clone()
        };
        Ok(self.optimal_value()?.abs().max(neg.optimal_value()?.abs()))
    }
}

impl PairwiseReward for RewardModel {
    fn agents(&self) -> usize {
        self.k
    }
    fn actions(&self) -> usize {
        self.a
    }
    fn unary(&self, k: usize, a: usize) -> f64 {
        self.phi[k * self.a + a]
    }
    fn pairwise(&self, i: usize, j: usize, ai: usize, aj: usize) -> f64 {
        self.lambda_int * self.g(i, j)[ai * self.a + aj]
    }
    fn has_pairwise(&self) -> bool {
        self.lambda_int != 0.0 && self.k >= 2
    }
}

fn check_shape(k: usize, a: usize, lambda_int: f64, sigma: f64) -> Result<()> {
    if k < 1 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if a < 2 {
        return Err(Error::Config("A must be at least 2".into()));
    }
    if !(lambda_int >= 0.0 && lambda_int.is_finite()) {
        return Err(Error::Config(format!("lambda_int must be >= 0, got {lambda_int}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be >= 0, got {sigma}")));
    }
    Ok(())
}

fn population_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
}

fn covariance(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn enumerate(k: usize, a: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..k {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..a).map(move |x| {
                        let mut q = p.clone();
                        q.push(x);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn single_agent_has_no_pairs() {
        let m = RewardModel::sample(0, 1, 4, 0.5, 0.5).unwrap();
        assert!(m.g_table().is_empty());
        for x in 0..4 {
            assert_eq!(m.mean_reward(&[x]).unwrap(), m.phi(0)[x]);
        }
    }

    #[test]
    fn hand_evaluated_mean_reward() {
        let m = RewardModel::from_tables(
            2,
            2,
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0.0, 1.0, 1.0, 0.0],
            0.5,
            0.0,
        )
        .unwrap();
        assert_eq!(m.mean_reward(&[0, 1]).unwrap(), 5.5);
    }

    #[test]
    fn zero_interaction_is_additive() {
        let m = RewardModel::sample(3, 3, 4, 0.0, 0.5).unwrap();
        for a in enumerate(3, 4) {
            assert_eq!(m.mean_reward(&a).unwrap(), m.additive_part(&a));
        }
    }

    #[test]
    fn zero_model_is_zero() {
        let m = RewardModel::from_tables(3, 2, vec![0.0; 6], vec![0.0; 12], 1.0, 0.0).unwrap();
        for a in enumerate(3, 2) {
            assert_eq!(m.mean_reward(&a).unwrap(), 0.0);
        }
        assert_eq!(m.optimal_value().unwrap(), 0.0);
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = RewardModel::sample(7, 4, 4, 1.0, 0.5).unwrap();
        let b = RewardModel::sample(7, 4, 4, 1.0, 0.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.phi_table().len(), 16);
        assert_eq!(a.g_table().len(), 6 * 16);
    }

    #[test]
    fn matched_variance_monte_carlo() {
        let m = RewardModel::sample(7, 4, 4, 1.0, 0.5).unwrap();
        let mut rng = rng_from_seed(11);
        let n = 100_000;
        let (mut sa, mut sa2, mut sp, mut sp2) = (0.0, 0.0, 0.0, 0.0);
        let mut a = vec![0; 4];
        for _ in 0..n {
            for x in a.iter_mut() {
                *x = rng.random_range(0..4);
            }
            let add = m.additive_part(&a);
            let pw = m.pairwise_part(&a);
            sa += add;
            sa2 += add * add;
            sp += pw;
            sp2 += pw * pw;
        }
        let nf = n as f64;
        let va = sa2 / nf - (sa / nf).powi(2);
        let vp = sp2 / nf - (sp / nf).powi(2);
        assert!((vp - va).abs() / va < 0.05, "additive {va} pairwise {vp}");
    }

    #[test]
    fn matched_variance_exact_across_team_sizes() {
        for &k in &[2usize, 4, 8, 16] {
            for seed in 0..5 {
                let m = RewardModel::sample(seed, k, 4, 1.0, 0.5).unwrap();
                let va = m.additive_variance_uniform();
                let vp = m.pairwise_variance_uniform();
                assert!((va - vp).abs() <= 1e-9 * va, "K={k}: {va} vs {vp}");
            }
        }
    }

    #[test]
    fn exact_pairwise_variance_matches_enumeration() {
        let m = RewardModel::sample(2, 4, 3, 1.0, 0.0).unwrap();
        let all = enumerate(4, 3);
        let n = all.len() as f64;
        let vals: Vec<f64> = all.iter().map(|a| m.pairwise_part(a)).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - m.pairwise_variance_uniform()).abs() < 1e-10);
    }

    #[test]
    fn mean_reward_is_linear_in_interaction_strength() {
        let m0 = RewardModel::sample(5, 3, 3, 0.0, 0.0).unwrap();
        for &lam in &[0.25, 1.0, 3.5] {
            let m = m0.with_lambda_int(lam).unwrap();
            for a in enumerate(3, 3) {
                let expected = m0.mean_reward(&a).unwrap() + lam * m.pairwise_part(&a);
                assert!((m.mean_reward(&a).unwrap() - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_action_is_domain_error() {
        let m = RewardModel::sample(0, 2, 3, 0.0, 0.0).unwrap();
        assert!(matches!(m.mean_reward(&[0, 3]), Err(Error::Domain(_))));
        assert!(matches!(m.mean_reward(&[0]), Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_shapes_are_config_errors() {
        assert!(matches!(RewardModel::sample(0, 0, 4, 0.0, 0.0), Err(Error::Config(_))));
        assert!(matches!(RewardModel::sample(0, 2, 1, 0.0, 0.0), Err(Error::Config(_))));
        assert!(matches!(RewardModel::sample(0, 2, 4, -1.0, 0.0), Err(Error::Config(_))));
        assert!(matches!(RewardModel::sample(0, 2, 4, 0.0, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_sample_is_mean() {
        let m = RewardModel::sample(1, 3, 4, 0.5, 0.0).unwrap();
        let mut rng = rng_from_seed(0);
        let a = [1, 2, 3];
        assert_eq!(m.sample_reward(&a, &mut rng).unwrap(), m.mean_reward(&a).unwrap());
    }

    #[test]
    fn sample_reward_law_of_large_numbers_and_variance() {
        let m = RewardModel::sample(1, 3, 4, 0.5, 0.5).unwrap();
        let a = [0, 1, 2];
        let mut rng = rng_from_seed(99);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| m.sample_reward(&a, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let f = m.mean_reward(&a).unwrap();
        assert!((mean - f).abs() < 3.0 * 0.5 / (n as f64).sqrt());
        // chi-square test on the sample variance, normal approximation, 1% two-sided
        let s2 = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let z = (s2 / 0.25 - 1.0) / (2.0 / (n as f64 - 1.0)).sqrt();
        assert!(z.abs() < 2.576, "z = {z}");
    }

    #[test]
    fn sample_reward_is_deterministic_in_rng_state() {
        let m = RewardModel::sample(1, 2, 4, 0.5, 0.5).unwrap();
        let x = m.sample_reward(&[1, 1], &mut rng_from_seed(5)).unwrap();
        let y = m.sample_reward(&[1, 1], &mut rng_from_seed(5)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn optimal_value_additive_is_sum_of_maxima() {
        let m = RewardModel::sample(9, 5, 4, 0.0, 0.5).unwrap();
        let expected: f64 = (0..5)
            .map(|k| m.phi(k).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .sum();
        assert!((m.optimal_value().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn optimal_value_matches_brute_force() {
        let m = RewardModel::sample(4, 3, 3, 0.8, 0.5).unwrap();
        let brute = enumerate(3, 3)
            .iter()
            .map(|a| m.mean_reward(a).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((m.optimal_value().unwrap() - brute).abs() < 1e-12);
        let max_abs = enumerate(3, 3)
            .iter()
            .map(|a| m.mean_reward(a).unwrap().abs())
            .fold(0.0, f64::max);
        assert!((m.max_abs_mean().unwrap() - max_abs).abs() < 1e-12);
    }

    #[test]
    fn optimal_value_refuses_huge_spaces() {
        let m = RewardModel::sample(0, 13, 4, 0.0, 0.0).unwrap();
        assert!(matches!(m.optimal_value(), Err(Error::Capability(_))));
        let ok = RewardModel::sample(0, 10, 4, 0.3, 0.0).unwrap();
        assert!(ok.optimal_value().is_ok());
    }

    #[test]
    fn pair_indexing_is_dense() {
        let k = 6;
        let mut seen = vec![false; pair_count(k)];
        for i in 0..k {
            for j in i + 1..k {
                let p = pair_index(k, i, j);
                assert!(!seen[p]);
                seen[p] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }
}
