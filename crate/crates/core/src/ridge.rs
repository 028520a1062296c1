//! Ridge-regression additive reward decomposition over per-agent one-hot
//! features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact_oracle::ChainKernel;
use crate::policy::{ChainPolicy, RolloutBatch};
use crate::reward_env::PairwiseReward;

/// One-hot design `Psi` (`N x K*A`), stored as the action indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    k: usize,
    a: usize,
    actions: Vec<usize>,
}

impl FeatureMatrix {
    /// Builds the design from `N x K` row-major actions.
    pub fn from_actions(k: usize, a: usize, actions: Vec<usize>) -> Result<Self> {
        if k == 0 || a == 0 || actions.len() % k != 0 {
            return Err(Error::Domain("actions do not form N x K rows".into()));
        }
        if actions.iter().any(|&x| x >= a) {
            return Err(Error::Domain("action out of range".into()));
        }
        Ok(Self { k, a, actions })
    }

    pub fn rows(&self) -> usize {
        self.actions.len() / self.k
    }

    /// Feature dimension `d = K * A`.
    pub fn dim(&self) -> usize {
        self.k * self.a
    }

    /// Column index of agent `j`'s action `x`.
    pub fn column(&self, j: usize, x: usize) -> usize {
        j * self.a + x
    }

    fn active(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        self.actions[n * self.k..(n + 1) * self.k]
            .iter()
            .enumerate()
            .map(move |(j, &x)| j * self.a + x)
    }

    /// Dense row `n` of `Psi`.
    pub fn row(&self, n: usize) -> Vec<f64> {
        let mut r = vec![0.0; self.dim()];
        for c in self.active(n) {
            r[c] = 1.0;
        }
        r
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows(), self.dim());
        for n in 0..self.rows() {
            for c in self.active(n) {
                m[(n, c)] = 1.0;
            }
        }
        m
    }

    /// `Psi^T Psi`.
    pub fn gram(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut g = DMatrix::zeros(d, d);
        let mut cols = vec![0; self.k];
        for n in 0..self.rows() {
            for (slot, c) in cols.iter_mut().zip(self.active(n)) {
                *slot = c;
            }
            for &i in &cols {
                for &j in &cols {
                    g[(i, j)] += 1.0;
                }
            }
        }
        g
    }

    /// `Psi^T r`.
    pub fn project(&self, r: &[f64]) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        for (n, &rn) in r.iter().enumerate() {
            for c in self.active(n) {
                v[c] += rn;
            }
        }
        v
    }
}

/// The one-hot design of a rollout batch.
pub fn build_features(batch: &RolloutBatch) -> FeatureMatrix {
    let (k, a) = (batch.agents(), batch.actions());
    let actions = (0..batch.len()).flat_map(|n| batch.joint(n).to_vec()).collect();
    FeatureMatrix { k, a, actions }
}

/// Fitted per-agent components `phi_hat` with Gram diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionFit {
    k: usize,
    a: usize,
    phi_hat: Vec<f64>,
    lambda: f64,
    /// Smallest eigenvalue of `Psi^T Psi / N`, when computed.
    gram_min_eig: Option<f64>,
    n: usize,
}

impl AttributionFit {
    /// Wraps explicit components (no fit diagnostics).
    pub fn from_phi(k: usize, a: usize, phi_hat: Vec<f64>) -> Result<Self> {
        if phi_hat.len() != k * a {
            return Err(Error::Domain(format!("phi_hat has {} entries, expected {}", phi_hat.len(), k * a)));
        }
        if phi_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("phi_hat must be finite".into()));
        }
        Ok(Self {
            k,
            a,
            phi_hat,
            lambda: 0.0,
            gram_min_eig: None,
            n: 0,
        })
    }

    pub fn agents(&self) -> usize {
        self.k
    }

    pub fn actions(&self) -> usize {
        self.a
    }

    pub fn phi_hat(&self) -> &[f64] {
        &self.phi_hat
    }

    /// Components of agent `j`.
    pub fn phi(&self, j: usize) -> &[f64] {
        &self.phi_hat[j * self.a..(j + 1) * self.a]
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn gram_min_eig(&self) -> Option<f64> {
        self.gram_min_eig
    }

    pub fn batch_size(&self) -> usize {
        self.n
    }

    /// `f_hat(a) = sum_k phi_hat_k(a_k)`.
    pub fn additive_predict(&self, a: &[usize]) -> Result<f64> {
        if a.len() != self.k || a.iter().any(|&x| x >= self.a) {
            return Err(Error::Domain("invalid joint action".into()));
        }
        Ok(self.value(a))
    }

    /// Adds `shifts[j]` to every component of agent `j`. Predictions are
    /// unchanged when the shifts sum to zero; advantages are unchanged always.
    pub fn gauge_shift(&self, shifts: &[f64]) -> Result<Self> {
        if shifts.len() != self.k {
            return Err(Error::Domain("one shift per agent required".into()));
        }
        let mut next = self.clone();
        for (j, c) in shifts.iter().enumerate() {
            next.phi_hat[j * self.a..(j + 1) * self.a].iter_mut().for_each(|v| *v += c);
        }
        Ok(next)
    }

    /// A fit of the same shape with new components and the same diagnostics.
    pub fn with_phi(&self, phi_hat: Vec<f64>) -> Result<Self> {
        let mut next = Self::from_phi(self.k, self.a, phi_hat)?;
        next.lambda = self.lambda;
        next.n = self.n;
        next.gram_min_eig = self.gram_min_eig;
        Ok(next)
    }
}

impl PairwiseReward for AttributionFit {
    fn agents(&self) -> usize {
        self.k
    }
    fn actions(&self) -> usize {
        self.a
    }
    fn unary(&self, k: usize, a: usize) -> f64 {
        self.phi_hat[k * self.a + a]
    }
    fn pairwise(&self, _i: usize, _j: usize, _ai: usize, _aj: usize) -> f64 {
        0.0
    }
    fn has_pairwise(&self) -> bool {
        false
    }
}

fn solve(psi: &FeatureMatrix, r: &[f64], lambda: f64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("ridge lambda must be positive, got {lambda}")));
    }
    if r.len() != psi.rows() {
        return Err(Error::Domain(format!("{} rewards for {} rows", r.len(), psi.rows())));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("rewards must be finite".into()));
    }
    let gram = psi.gram();
    let system = &gram + DMatrix::identity(psi.dim(), psi.dim()) * lambda;
    let rhs = psi.project(r);
    let chol = system
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("ridge system is not positive definite".into()))?;
    let phi = chol.solve(&rhs);
    let residual = (&system * &phi - &rhs).amax();
    if residual > 1e-8 * (1.0 + rhs.amax()) {
        return Err(Error::Numeric(format!("ridge residual {residual:e} too large")));
    }
    Ok((gram, phi.iter().copied().collect()))
}

/// `phi_hat = (lambda I + Psi^T Psi)^{-1} Psi^T r`, with the smallest
/// eigenvalue of `Psi^T Psi / N`.
pub fn ridge_fit(psi: &FeatureMatrix, r: &[f64], lambda: f64) -> Result<AttributionFit> {
    let (gram, phi_hat) = solve(psi, r, lambda)?;
    let n = psi.rows();
    Ok(AttributionFit {
        k: psi.k,
        a: psi.a,
        phi_hat,
        lambda,
        gram_min_eig: Some(smallest_eigenvalue(&(gram / n.max(1) as f64))),
        n,
    })
}

/// [`ridge_fit`] without the eigenvalue diagnostic, for training loops.
pub fn ridge_fit_fast(psi: &FeatureMatrix, r: &[f64], lambda: f64) -> Result<AttributionFit> {
    let (_, phi_hat) = solve(psi, r, lambda)?;
    Ok(AttributionFit {
        k: psi.k,
        a: psi.a,
        phi_hat,
        lambda,
        gram_min_eig: None,
        n: psi.rows(),
    })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn smallest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Smallest eigenvalue of the empirical Gram `Psi^T Psi / N`.
pub fn gram_smallest_eigenvalue(psi: &FeatureMatrix) -> f64 {
    let n = psi.rows().max(1) as f64;
    smallest_eigenvalue(&(psi.gram() / n))
}

/// Population Gram `E_mu[psi psi^T]` from the chain marginals and joints.
pub fn population_gram(policy: &ChainPolicy) -> DMatrix<f64> {
    let (k, a) = (policy.agents(), policy.actions());
    let law = ChainKernel::new(policy).law(None).expect("unanchored law");
    let mut g = DMatrix::zeros(k * a, k * a);
    for i in 0..k {
        let m = law.marginal(i).unwrap();
        for x in 0..a {
            g[(i * a + x, i * a + x)] = m[x];
        }
        for j in i + 1..k {
            let t = law.joint(i, j).unwrap();
            for x in 0..a {
                for y in 0..a {
                    g[(i * a + x, j * a + y)] = t[x * a + y];
                    g[(j * a + y, i * a + x)] = t[x * a + y];
                }
            }
        }
    }
    g
}
