//! Closed-form calculus on diagonal Gaussians.
//!
//! Everything here is a pure function of its arguments. The full-matrix
//! helpers ([`diag_approx_by_precision`], [`low_rank_select`]) exist to
//! check the diagonal and low-rank curvature approximations; training only
//! ever uses diagonal Gaussians.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;

/// Gaussian with independent coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mu: Vec<f64>,
    var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mu.len() != var.len() {
            return Err(Error::Dimension(mu.len(), var.len()));
        }
        if let Some((i, v)) = var.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("variance[{i}] = {v} must be positive and finite")));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("non-finite mean".into()));
        }
        Ok(Self { mu, var })
    }

    /// `N(mean, var·I)` in `dim` dimensions.
    pub fn isotropic(dim: usize, mean: f64, var: f64) -> Result<Self> {
        Self::new(vec![mean; dim], vec![var; dim])
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Concatenation of independent blocks.
    pub fn concat(parts: &[DiagGaussian]) -> Self {
        Self {
            mu: parts.iter().flat_map(|p| p.mu.iter().copied()).collect(),
            var: parts.iter().flat_map(|p| p.var.iter().copied()).collect(),
        }
    }

    /// Every variance multiplied by `factor`, means untouched.
    pub fn scale_variance(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidArgument(format!("variance factor {factor} must be positive")));
        }
        Self::new(self.mu.clone(), self.var.iter().map(|v| v * factor).collect())
    }

    /// Log density at `x`.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        self.mu
            .iter()
            .zip(&self.var)
            .zip(x)
            .map(|((m, v), xi)| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (xi - m).powi(2) / v))
            .sum()
    }
}

fn check_dims(q: &DiagGaussian, p: &DiagGaussian) -> Result<()> {
    if q.dim() != p.dim() {
        return Err(Error::Dimension(q.dim(), p.dim()));
    }
    Ok(())
}

/// `KL(q ‖ p)`.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dims(q, p)?;
    Ok(0.5
        * q.mu
            .iter()
            .zip(&q.var)
            .zip(p.mu.iter().zip(&p.var))
            .map(|((qm, qv), (pm, pv))| (pv / qv).ln() - 1.0 + qv / pv + (qm - pm).powi(2) / pv)
            .sum::<f64>())
}

/// Tempers `g` by temperature `1/lambda`: the variance shrinks by `lambda`.
pub fn temper(g: &DiagGaussian, lambda: f64) -> Result<DiagGaussian> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("temper factor {lambda} must be positive")));
    }
    g.scale_variance(1.0 / lambda)
}

/// KL with only the quadratic mean term multiplied by `lambda`; equal to the
/// KL between both distributions tempered by `lambda`.
pub fn kl_lambda(q: &DiagGaussian, p: &DiagGaussian, lambda: f64) -> Result<f64> {
    check_dims(q, p)?;
    if lambda < 1.0 {
        log::debug!("kl_lambda called with lambda = {lambda} < 1");
    }
    Ok(0.5
        * q.mu
            .iter()
            .zip(&q.var)
            .zip(p.mu.iter().zip(&p.var))
            .map(|((qm, qv), (pm, pv))| lambda * (qm - pm).powi(2) / pv + qv / pv + (pv / qv).ln() - 1.0)
            .sum::<f64>())
}

/// Previous posterior whose data-dependent precision is up-weighted by
/// `lambda`: `λ·max(0, 1/var − 1/prior0_var) + 1/prior0_var`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClippedPrecisionPrior {
    base: DiagGaussian,
    prior0_var: Vec<f64>,
    lambda: f64,
}

impl ClippedPrecisionPrior {
    pub fn new(base: DiagGaussian, prior0_var: Vec<f64>, lambda: f64) -> Result<Self> {
        if prior0_var.len() != base.dim() {
            return Err(Error::Dimension(base.dim(), prior0_var.len()));
        }
        if prior0_var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("initial prior variance must be positive".into()));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda {lambda} must be positive")));
        }
        if lambda < 1.0 {
            log::warn!("prior tempering lambda = {lambda} < 1");
        }
        Ok(Self {
            base,
            prior0_var,
            lambda,
        })
    }

    /// The initial prior itself: no data-dependent precision yet.
    pub fn initial(prior0: &DiagGaussian, lambda: f64) -> Result<Self> {
        Self::new(prior0.clone(), prior0.var.clone(), lambda)
    }

    pub fn base(&self) -> &DiagGaussian {
        &self.base
    }

    pub fn prior0_var(&self) -> &[f64] {
        &self.prior0_var
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Effective precision used by the quadratic mean term. At `lambda == 1`
    /// this is exactly `1/base.var`.
    pub fn precision(&self) -> Vec<f64> {
        if self.lambda == 1.0 {
            return self.base.var.iter().map(|v| 1.0 / v).collect();
        }
        self.base
            .var
            .iter()
            .zip(&self.prior0_var)
            .map(|(v, v0)| {
                let data = (1.0 / v - 1.0 / v0).max(0.0);
                self.lambda * data + 1.0 / v0
            })
            .collect()
    }
}

/// KL whose quadratic mean term uses the λ-tempered, clipped precision;
/// trace and log-determinant terms use the unmodified previous posterior.
pub fn kl_lambda_tilde(q: &DiagGaussian, prior: &ClippedPrecisionPrior) -> Result<f64> {
    check_dims(q, &prior.base)?;
    let prec = prior.precision();
    if let Some(i) = prec.iter().position(|p| !(*p > 0.0 && p.is_finite())) {
        return Err(Error::InvalidArgument(format!("effective precision[{i}] = {} is not positive", prec[i])));
    }
    let p = &prior.base;
    Ok(0.5
        * q.mu
            .iter()
            .zip(&q.var)
            .zip(p.mu.iter().zip(&p.var))
            .zip(&prec)
            .map(|(((qm, qv), (pm, pv)), pr)| pr * (qm - pm).powi(2) + qv / pv + (pv / qv).ln() - 1.0)
            .sum::<f64>())
}

/// KL between `q` tempered by `lambda` and `p` tempered by `gamma·lambda`,
/// up to a constant. The constant `½Σ(ln p.var − 1)` is kept so that
/// `gamma = lambda = 1` reproduces [`kl_diag`].
pub fn kl_lambda_gamma(q: &DiagGaussian, p: &DiagGaussian, lambda: f64, gamma: f64) -> Result<f64> {
    check_dims(q, p)?;
    if !(lambda > 0.0 && gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} and gamma {gamma} must be positive")));
    }
    Ok(0.5
        * q.mu
            .iter()
            .zip(&q.var)
            .zip(p.mu.iter().zip(&p.var))
            .map(|((qm, qv), (pm, pv))| {
                lambda * (qm - pm).powi(2) / pv + gamma * qv / pv - qv.ln() + pv.ln() - 1.0
            })
            .sum::<f64>())
}

/// Variances of the diagonal Gaussian minimizing `KL(q_diag ‖ N(·, Σ))`
/// given the full precision `Σ⁻¹`: the diagonal precision entries match.
pub fn diag_approx_by_precision(full_precision: &SymMatrix) -> Result<Vec<f64>> {
    full_precision.cholesky()?;
    full_precision
        .diag()
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if d > 0.0 {
                Ok(1.0 / d)
            } else {
                Err(Error::NotSpd(format!("diagonal entry {i} is {d}")))
            }
        })
        .collect()
}

/// Rank-`k` precision approximation keeping the `k` largest eigenpairs of
/// `H` and replacing the rest of the spectrum with `delta`.
#[derive(Debug, Clone)]
pub struct LowRankPrecision {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    /// Eigenvectors of the discarded directions.
    pub rest: Vec<Vec<f64>>,
    pub delta: f64,
}

impl LowRankPrecision {
    /// `Σ λᵢ xᵢxᵢᵀ + δ Σ xⱼxⱼᵀ`.
    pub fn reconstruct(&self) -> SymMatrix {
        let n = self.vectors.first().or(self.rest.first()).map_or(0, Vec::len);
        let mut data = vec![0.0; n * n];
        let terms = self
            .values
            .iter()
            .zip(&self.vectors)
            .chain(self.rest.iter().map(|v| (&self.delta, v)));
        for (w, v) in terms {
            for i in 0..n {
                for j in 0..n {
                    data[i * n + j] += w * v[i] * v[j];
                }
            }
        }
        SymMatrix::new(n, data).expect("outer products are symmetric")
    }
}

pub fn low_rank_select(h: &SymMatrix, k: usize, delta: f64) -> Result<LowRankPrecision> {
    let p = h.dim();
    if k == 0 || k >= p {
        return Err(Error::InvalidArgument(format!("rank {k} must satisfy 1 <= k < {p}")));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta {delta} must be positive")));
    }
    h.cholesky()?;
    let (values, vectors) = h.symmetric_eigen();
    let rest = vectors[k..].to_vec();
    Ok(LowRankPrecision {
        values: values[..k].to_vec(),
        vectors: vectors[..k].to_vec(),
        rest,
        delta,
    })
}

fn film_scale_terms(q: &DiagGaussian, prior: &DiagGaussian) -> (f64, f64) {
    // (Tr(Σ0⁻¹Σ) + μᵀΣ0⁻¹μ, μ0ᵀΣ0⁻¹μ)
    let mut quad = 0.0;
    let mut cross = 0.0;
    for i in 0..q.dim() {
        quad += (q.var[i] + q.mu[i] * q.mu[i]) / prior.var[i];
        cross += prior.mu[i] * q.mu[i] / prior.var[i];
    }
    (quad, cross)
}

/// Positive root `c*` of `c²(Tr(Σ0⁻¹Σ) + μᵀΣ0⁻¹μ) − c μ0ᵀΣ0⁻¹μ − d = 0`:
/// the rescaling `N(cμ, c²Σ)` closest to the prior. The matching FiLM scale
/// is `1/c*`.
pub fn film_optimal_scale(q: &DiagGaussian, prior: &DiagGaussian) -> Result<f64> {
    check_dims(q, prior)?;
    let (a, b) = film_scale_terms(q, prior);
    let d = q.dim() as f64;
    Ok((b + (b * b + 4.0 * d * a).sqrt()) / (2.0 * a))
}

/// `KL(N(cμ, c²Σ) ‖ prior)`.
pub fn film_scaled_kl(q: &DiagGaussian, prior: &DiagGaussian, c: f64) -> Result<f64> {
    let scaled = DiagGaussian::new(
        q.mu.iter().map(|m| c * m).collect(),
        q.var.iter().map(|v| c * c * v).collect(),
    )?;
    kl_diag(&scaled, prior)
}

/// `∂/∂c KL(N(cμ, c²Σ) ‖ prior)`.
pub fn film_scaled_kl_derivative(q: &DiagGaussian, prior: &DiagGaussian, c: f64) -> Result<f64> {
    check_dims(q, prior)?;
    let (a, b) = film_scale_terms(q, prior);
    Ok(-(q.dim() as f64) / c + c * a - b)
}

/// `∂²/∂c² KL(N(cμ, c²Σ) ‖ prior) = d/c² + Tr(Σ0⁻¹Σ) + μᵀΣ0⁻¹μ`.
pub fn film_scaled_kl_curvature(q: &DiagGaussian, prior: &DiagGaussian, c: f64) -> Result<f64> {
    check_dims(q, prior)?;
    let (a, _) = film_scale_terms(q, prior);
    Ok(q.dim() as f64 / (c * c) + a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mu: &[f64], var: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mu.to_vec(), var.to_vec()).unwrap()
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = g(&[0.0], &[1.0]);
        assert_eq!(kl_diag(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        assert_eq!(kl_diag(&g(&[1.0], &[1.0]), &g(&[0.0], &[1.0])).unwrap(), 0.5);
    }

    #[test]
    fn kl_rejects_dimension_mismatch() {
        assert!(matches!(
            kl_diag(&g(&[0.0], &[1.0]), &g(&[0.0, 0.0], &[1.0, 1.0])),
            Err(Error::Dimension(1, 2))
        ));
    }

    #[test]
    fn temper_scales_variance_only() {
        let t = temper(&g(&[2.0], &[4.0]), 2.0).unwrap();
        assert_eq!(t, g(&[2.0], &[2.0]));
        assert_eq!(temper(&g(&[0.0], &[1.0]), 1.0).unwrap(), g(&[0.0], &[1.0]));
        assert!(temper(&g(&[0.0], &[1.0]), 0.0).is_err());
        assert!(temper(&g(&[0.0], &[1.0]), -1.0).is_err());
    }

    #[test]
    fn kl_lambda_hand_values() {
        let q = g(&[1.0], &[1.0]);
        let p = g(&[0.0], &[1.0]);
        assert_eq!(kl_lambda(&q, &p, 10.0).unwrap(), 5.0);
        assert_eq!(kl_lambda(&q, &p, 1.0).unwrap(), kl_diag(&q, &p).unwrap());
    }

    #[test]
    fn kl_lambda_tilde_hand_value() {
        let base = g(&[0.0], &[0.5]);
        let prior = ClippedPrecisionPrior::new(base, vec![1.0], 10.0).unwrap();
        let q = g(&[1.0], &[0.5]);
        assert!((kl_lambda_tilde(&q, &prior).unwrap() - 5.5).abs() < 1e-12);
    }

    #[test]
    fn kl_lambda_tilde_without_data_ignores_lambda() {
        let base = g(&[0.3, -0.2], &[2.0, 0.5]);
        let q = g(&[1.0, 0.4], &[0.7, 0.1]);
        let expected = kl_diag(&q, &base).unwrap();
        for lambda in [1.0, 3.0, 100.0] {
            let prior = ClippedPrecisionPrior::new(base.clone(), base.var().to_vec(), lambda).unwrap();
            assert!((kl_lambda_tilde(&q, &prior).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_is_exactly_at_zero() {
        // base precision below the initial prior precision: data part clipped to 0
        let base = g(&[0.0], &[2.0]);
        let prior = ClippedPrecisionPrior::new(base, vec![1.0], 5.0).unwrap();
        assert_eq!(prior.precision(), vec![1.0]);
    }

    #[test]
    fn kl_lambda_gamma_reduces_to_kl_at_unit_parameters() {
        let q = g(&[0.2, 1.0], &[0.3, 2.0]);
        let p = g(&[0.0, -1.0], &[1.5, 0.4]);
        let a = kl_lambda_gamma(&q, &p, 1.0, 1.0).unwrap();
        assert!((a - kl_diag(&q, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn diag_approx_hand_inverse() {
        let id = SymMatrix::identity(3);
        assert_eq!(diag_approx_by_precision(&id).unwrap(), vec![1.0; 3]);
        let cov = SymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let v = diag_approx_by_precision(&cov.inverse().unwrap()).unwrap();
        assert!((v[0] - 1.5).abs() < 1e-12 && (v[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn low_rank_keeps_largest_eigenvalues() {
        let h = SymMatrix::diagonal(&[3.0, 2.0, 1.0]);
        let r = low_rank_select(&h, 1, 1e-6).unwrap();
        assert!((r.values[0] - 3.0).abs() < 1e-12);
        let r = low_rank_select(&h, 2, 1e-6).unwrap();
        assert!((r.values[0] - 3.0).abs() < 1e-12 && (r.values[1] - 2.0).abs() < 1e-12);
        let rec = r.reconstruct();
        assert!((rec.get(2, 2) - 1e-6).abs() < 1e-15);
        assert!(low_rank_select(&h, 3, 1e-6).is_err());
        assert!(low_rank_select(&SymMatrix::diagonal(&[1.0, -1.0]), 1, 1e-6).is_err());
    }

    #[test]
    fn film_scale_hand_values() {
        let prior = g(&[0.0], &[1.0]);
        let c = film_optimal_scale(&g(&[2.0], &[1.0]), &prior).unwrap();
        assert!((c - (0.2f64).sqrt()).abs() < 1e-12);
        // q equal to the prior: the KL is already zero at c = 1
        let c = film_optimal_scale(&prior, &prior).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn film_scale_zeroes_derivative() {
        let q = g(&[0.5, -1.0, 2.0], &[0.2, 0.1, 0.5]);
        let prior = g(&[0.1, 0.0, -0.3], &[1.0, 0.5, 2.0]);
        let c = film_optimal_scale(&q, &prior).unwrap();
        assert!(film_scaled_kl_derivative(&q, &prior, c).unwrap().abs() < 1e-8);
        assert!(film_scaled_kl_derivative(&q, &prior, c * 0.99).unwrap() < 0.0);
        assert!(film_scaled_kl_derivative(&q, &prior, c * 1.01).unwrap() > 0.0);
        assert!(film_scaled_kl_curvature(&q, &prior, c).unwrap() > 0.0);
    }
}
