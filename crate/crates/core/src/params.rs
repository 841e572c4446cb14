//! Parameters of the pattern-factorized mutually exciting process.
//!
//! The intensity of the ordered pair `(u, v)` decomposes over `K·K`
//! patterns `(k, k')`:
//!
//! `λ_{u,v}(t) = Σ_{k,k'} [ μ_{u,k,k',v} + Σ_{t_j} α_{k,k'}·exp(-(t-t_j)/δ) ]`
//!
//! where the inner sum runs over strictly earlier opposite-direction
//! events `v → u` carrying the mirrored pattern `(k', k)`. Base rates are
//! stored explicitly only for pairs that had events during fitting;
//! everywhere else they fall back to the factorization
//! `μ̃_{u,k,k',v} = φ_{u,k}·Ω_{k,k'}·φ_{v,k'}` inherited from the static
//! community structure, scaled by the pair covariates through
//! `β_{k,k'}` and, after fitting over a window of length `T`, by the
//! posterior normalizer. Both regimes are covered by one formula,
//!
//! `fallback = μ̃ / (T_fb + exp(-xᵀβ))`,
//!
//! with `T_fb = 0` giving the prior mean `μ̃·exp(xᵀβ)` of a fresh model
//! and `T_fb = T` giving the closed-form update a fit converges to for a
//! pair with no events.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::ExpKernel;

/// Gamma(shape, rate) prior on every excitation weight `α_{k,k'}`.
pub const ALPHA_PRIOR_SHAPE: f64 = 1.0;
pub const ALPHA_PRIOR_RATE: f64 = 1.0;

/// Per-pair covariate vectors; pairs not present are zero vectors.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CovariateMatrix {
    d: usize,
    #[serde(with = "pair_map")]
    rows: BTreeMap<(u32, u32), Vec<f64>>,
}

impl CovariateMatrix {
    pub fn empty() -> Self {
        CovariateMatrix {
            d: 0,
            rows: BTreeMap::new(),
        }
    }

    pub fn new(d: usize, rows: BTreeMap<(u32, u32), Vec<f64>>) -> Result<Self> {
        for ((u, v), x) in &rows {
            if u == v {
                return Err(Error::data(format!("covariates for self-pair ({u}, {v})")));
            }
            if x.len() != d {
                return Err(Error::data(format!(
                    "covariate row for pair ({u}, {v}) has {} entries, expected {d}",
                    x.len()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!(
                    "covariate row for pair ({u}, {v}) contains a non-finite value"
                )));
            }
        }
        Ok(CovariateMatrix { d, rows })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.d == 0 || self.rows.is_empty()
    }

    /// Covariates of `(u, v)`; `None` means the zero vector.
    pub fn get(&self, u: u32, v: u32) -> Option<&[f64]> {
        self.rows.get(&(u, v)).map(|x| x.as_slice())
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&(u32, u32), &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HawkesParams {
    k: usize,
    v: u32,
    d: usize,
    phi: DMatrix<f64>,
    omega: DMatrix<f64>,
    alpha: DMatrix<f64>,
    delta: f64,
    /// Explicit base-rate blocks, `K²` per pair, row-major over `(k, k')`.
    #[serde(with = "pair_map")]
    mu: BTreeMap<(u32, u32), Vec<f64>>,
    /// `0` for a generative model (prior-mean fallback); set to the
    /// training window length by the fitters.
    mu_fallback_horizon: f64,
    /// Covariate weights, flattened as `beta[(k·K + k')·D + d]`.
    beta: Vec<f64>,
    tau: f64,
    nu: Vec<f64>,
}

impl HawkesParams {
    /// A fresh model on the community structure `(φ, Ω)` with uniform
    /// excitation `alpha` and no covariates.
    pub fn new(
        phi: DMatrix<f64>,
        omega: DMatrix<f64>,
        alpha: DMatrix<f64>,
        delta: f64,
    ) -> Result<Self> {
        Self::with_covariates(phi, omega, alpha, delta, 0, 1.0, Vec::new())
    }

    pub fn with_covariates(
        phi: DMatrix<f64>,
        omega: DMatrix<f64>,
        alpha: DMatrix<f64>,
        delta: f64,
        d: usize,
        tau: f64,
        nu: Vec<f64>,
    ) -> Result<Self> {
        let k = phi.ncols();
        let v = phi.nrows();
        if k == 0 || v == 0 {
            return Err(Error::domain(
                "the model needs at least one node and one pattern".to_string(),
            ));
        }
        if omega.nrows() != k || omega.ncols() != k {
            return Err(Error::domain(format!(
                "community weight matrix is {}x{}, expected {k}x{k}",
                omega.nrows(),
                omega.ncols()
            )));
        }
        if alpha.nrows() != k || alpha.ncols() != k {
            return Err(Error::domain(format!(
                "excitation matrix is {}x{}, expected {k}x{k}",
                alpha.nrows(),
                alpha.ncols()
            )));
        }
        if phi.iter().any(|x| !x.is_finite() || *x < 0.0)
            || omega.iter().any(|x| !x.is_finite() || *x < 0.0)
        {
            return Err(Error::domain(
                "community factors must be finite and non-negative".to_string(),
            ));
        }
        if alpha.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::domain(
                "excitation jumps must be finite and non-negative".to_string(),
            ));
        }
        if !delta.is_finite() || delta <= 0.0 {
            return Err(Error::domain(format!(
                "decay time must be finite and positive, got {delta}"
            )));
        }
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::domain(format!(
                "covariate noise precision must be positive, got {tau}"
            )));
        }
        if nu.len() != d {
            return Err(Error::domain(format!(
                "prior variance vector has length {}, expected {d}",
                nu.len()
            )));
        }
        if nu.iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return Err(Error::domain(
                "covariate prior variances must be positive".to_string(),
            ));
        }
        Ok(HawkesParams {
            k,
            v: v as u32,
            d,
            phi,
            omega,
            alpha,
            delta,
            mu: BTreeMap::new(),
            mu_fallback_horizon: 0.0,
            beta: vec![0.0; k * k * d],
            tau,
            nu,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn node_count(&self) -> u32 {
        self.v
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn alpha(&self) -> &DMatrix<f64> {
        &self.alpha
    }

    pub fn alpha_at(&self, k: usize, kp: usize) -> f64 {
        self.alpha[(k, kp)]
    }

    pub fn set_alpha(&mut self, alpha: DMatrix<f64>) -> Result<()> {
        if alpha.nrows() != self.k || alpha.ncols() != self.k {
            return Err(Error::domain("excitation matrix has wrong shape".to_string()));
        }
        if alpha.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::domain(
                "excitation jumps must be finite and non-negative".to_string(),
            ));
        }
        self.alpha = alpha;
        Ok(())
    }

    pub fn kernel(&self, k: usize, kp: usize) -> ExpKernel {
        ExpKernel::new(self.alpha[(k, kp)], self.delta).expect("validated parameters")
    }

    /// All per-pattern branching ratios below one.
    pub fn is_stationary(&self) -> bool {
        self.alpha.iter().all(|a| a * self.delta < 1.0)
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn beta_block(&self, c: usize) -> &[f64] {
        &self.beta[c * self.d..(c + 1) * self.d]
    }

    pub fn set_beta(&mut self, beta: Vec<f64>) -> Result<()> {
        if beta.len() != self.k * self.k * self.d {
            return Err(Error::domain("covariate weight vector has wrong length".to_string()));
        }
        self.beta = beta;
        Ok(())
    }

    pub fn mu_fallback_horizon(&self) -> f64 {
        self.mu_fallback_horizon
    }

    pub fn set_mu_fallback_horizon(&mut self, t: f64) {
        self.mu_fallback_horizon = t;
    }

    pub fn stored_mu(&self) -> &BTreeMap<(u32, u32), Vec<f64>> {
        &self.mu
    }

    pub fn stored_mu_block(&self, u: u32, v: u32) -> Option<&[f64]> {
        self.mu.get(&(u, v)).map(|b| b.as_slice())
    }

    pub fn insert_mu_block(&mut self, u: u32, v: u32, block: Vec<f64>) -> Result<()> {
        if u == v {
            return Err(Error::domain(format!("base-rate block for self-pair ({u}, {v})")));
        }
        if block.len() != self.k * self.k {
            return Err(Error::domain("base-rate block has wrong length".to_string()));
        }
        if block.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::domain(
                "base rates must be finite and non-negative".to_string(),
            ));
        }
        self.mu.insert((u, v), block);
        Ok(())
    }

    /// Factorized prior shape `μ̃_{u,k,k',v} = φ_{u,k}·Ω_{k,k'}·φ_{v,k'}`.
    pub fn mu_tilde(&self, u: u32, k: usize, kp: usize, v: u32) -> f64 {
        self.phi[(u as usize, k)] * self.omega[(k, kp)] * self.phi[(v as usize, kp)]
    }

    /// `xᵀβ_{k,k'}` for pattern index `c = k·K + k'`.
    pub fn linear_predictor(&self, c: usize, x: Option<&[f64]>) -> f64 {
        match x {
            Some(x) if self.d > 0 => {
                let b = &self.beta[c * self.d..(c + 1) * self.d];
                b.iter().zip(x).map(|(bi, xi)| bi * xi).sum()
            }
            _ => 0.0,
        }
    }

    /// Base rate of `(u, v)` at pattern `(k, k')`: the stored value if the
    /// pair was fitted, otherwise `μ̃ / (T_fb + exp(-xᵀβ))`.
    pub fn base_rate(&self, u: u32, k: usize, kp: usize, v: u32, x: Option<&[f64]>) -> f64 {
        if let Some(block) = self.mu.get(&(u, v)) {
            return block[k * self.k + kp];
        }
        self.fallback_rate(u, k, kp, v, x)
    }

    fn fallback_rate(&self, u: u32, k: usize, kp: usize, v: u32, x: Option<&[f64]>) -> f64 {
        let mt = self.mu_tilde(u, k, kp, v);
        if mt == 0.0 {
            return 0.0;
        }
        let c = k * self.k + kp;
        mt / (self.mu_fallback_horizon + (-self.linear_predictor(c, x)).exp())
    }

    /// Writes the full `K²` base-rate block of `(u, v)` into `buf`.
    pub fn base_rate_block_into(&self, u: u32, v: u32, x: Option<&[f64]>, buf: &mut [f64]) {
        debug_assert_eq!(buf.len(), self.k * self.k);
        if let Some(block) = self.mu.get(&(u, v)) {
            buf.copy_from_slice(block);
            return;
        }
        for k in 0..self.k {
            for kp in 0..self.k {
                buf[k * self.k + kp] = self.fallback_rate(u, k, kp, v, x);
            }
        }
    }

    /// Total base rate of the pair, `Σ_{k,k'} μ_{u,k,k',v}`.
    pub fn pair_base_rate(&self, u: u32, v: u32, x: Option<&[f64]>) -> f64 {
        if let Some(block) = self.mu.get(&(u, v)) {
            return block.iter().sum();
        }
        let mut s = 0.0;
        for k in 0..self.k {
            for kp in 0..self.k {
                s += self.fallback_rate(u, k, kp, v, x);
            }
        }
        s
    }

    /// `Σ_{u≠v} Σ_{k,k'} μ̃_{u,k,k',v}`, via column sums rather than a pair
    /// loop: `Σ_{k,k'} Ω_{k,k'}·(S_k·S_{k'} - (ΦᵀΦ)_{k,k'})` with
    /// `S = Σ_u φ_u`.
    pub fn total_mu_tilde(&self) -> f64 {
        let s: Vec<f64> = (0..self.k).map(|k| self.phi.column(k).sum()).collect();
        let gram = self.phi.transpose() * &self.phi;
        let mut total = 0.0;
        for k in 0..self.k {
            for kp in 0..self.k {
                total += self.omega[(k, kp)] * (s[k] * s[kp] - gram[(k, kp)]);
            }
        }
        total.max(0.0)
    }

    /// Total base rate over all ordered pairs, `Σ_{u≠v} μ_{u,v}`. Computed
    /// from the factorized total plus corrections for the sparse sets of
    /// stored and covariate-bearing pairs, so the cost is
    /// `O(V·K² + (#stored + #covariate rows)·K²)`.
    pub fn total_base_rate(&self, covs: &CovariateMatrix) -> f64 {
        let zero_cov_denom = self.mu_fallback_horizon + 1.0;
        let mut total = self.total_mu_tilde() / zero_cov_denom;
        let correct = |u: u32, v: u32| {
            let x = covs.get(u, v);
            let mut actual = 0.0;
            let mut plain = 0.0;
            for k in 0..self.k {
                for kp in 0..self.k {
                    actual += self.base_rate(u, k, kp, v, x);
                    plain += self.mu_tilde(u, k, kp, v) / zero_cov_denom;
                }
            }
            actual - plain
        };
        for &(u, v) in self.mu.keys() {
            total += correct(u, v);
        }
        if self.d > 0 {
            for (&(u, v), _) in covs.pairs() {
                if !self.mu.contains_key(&(u, v)) {
                    total += correct(u, v);
                }
            }
        }
        total
    }
}

/// Serde shim for maps keyed by node pairs: serialized as an entry list,
/// which keeps the JSON readable and avoids string-keyed maps.
pub(crate) mod pair_map {
    use serde::de::Deserializer;
    use serde::ser::Serializer;
    use serde::{Deserialize, Serialize};
    use std::collections::BTreeMap;

    pub fn serialize<S, V>(map: &BTreeMap<(u32, u32), V>, ser: S) -> Result<S::Ok, S::Error>
    where
        S: Serializer,
        V: Serialize,
    {
        let entries: Vec<(&(u32, u32), &V)> = map.iter().collect();
        entries.serialize(ser)
    }

    pub fn deserialize<'de, D, V>(de: D) -> Result<BTreeMap<(u32, u32), V>, D::Error>
    where
        D: Deserializer<'de>,
        V: Deserialize<'de>,
    {
        let entries: Vec<((u32, u32), V)> = Vec::deserialize(de)?;
        Ok(entries.into_iter().collect())
    }
}
