//! Gaussian exponential-family arithmetic in natural-parameter form.
//!
//! A Gaussian is written exp(-½βx² + rx) with precision β and linear shift r
//! (ND: precision matrix Q, shift vector r). Natural parameters are the
//! canonical representation throughout: EP's cavity algebra is additive in
//! them, and moment form is derived on demand. Site approximations may carry
//! negative precision, so the parameter types are unconstrained; the density
//! types enforce positivity.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stable::HALF_LN_2PI;

/// Asymmetry beyond this (relative to the largest entry) is rejected rather
/// than silently symmetrized away.
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ExpFamError {
    #[error("variance must be strictly positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("precision must be strictly positive and finite, got {0}")]
    InvalidPrecision(f64),
    #[error("parameters must be finite")]
    NonFinite,
    #[error("precision matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("covariance matrix is not positive definite")]
    CovarianceNotPositiveDefinite,
    #[error("precision matrix asymmetry {0:e} exceeds tolerance {SYMMETRY_TOL:e}")]
    Asymmetric(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("KL divergence must be nonnegative, got {0}")]
    NegativeKl(f64),
}

/// Componentwise arithmetic shared by 1D and ND natural parameters.
///
/// The EP engine is generic over this trait; all operations are exact
/// componentwise arithmetic with no sign constraints.
pub trait NaturalParams: Clone + Send + Sync + PartialEq + std::fmt::Debug {
    fn add(&self, other: &Self) -> Self;
    fn sub(&self, other: &Self) -> Self;
    fn scale(&self, factor: f64) -> Self;
    fn zero_like(&self) -> Self;
    fn all_finite(&self) -> bool;
    /// max over components of |a-b| / (1 + |b|).
    fn max_rel_diff(&self, other: &Self) -> f64;
    /// Whether the parameters are interpretable as a density with precision
    /// above `floor` (1D: β > floor; ND: Q positive definite).
    fn density_ok(&self, floor: f64) -> bool;
}

/// Natural parameters λ = (β, r) of exp(-½βx² + rx); the cavity algebra's
/// "Compute cavity parameter λ₋ᵢ ← λ_s − λᵢ" is [`cavity_subtract`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaturalParams1D {
    /// β, units 1/x²
    pub precision: f64,
    /// r, units 1/x
    pub shift: f64,
}

impl NaturalParams1D {
    pub const ZERO: Self = Self { precision: 0.0, shift: 0.0 };

    pub fn new(precision: f64, shift: f64) -> Self {
        Self { precision, shift }
    }

    /// Log-normalizer of the unnormalized density exp(-½βx² + rx); only
    /// defined for β > 0.
    pub fn log_normalizer(&self) -> f64 {
        HALF_LN_2PI - 0.5 * self.precision.ln() + self.shift * self.shift / (2.0 * self.precision)
    }
}

impl NaturalParams for NaturalParams1D {
    fn add(&self, other: &Self) -> Self {
        Self::new(self.precision + other.precision, self.shift + other.shift)
    }
    fn sub(&self, other: &Self) -> Self {
        Self::new(self.precision - other.precision, self.shift - other.shift)
    }
    fn scale(&self, factor: f64) -> Self {
        Self::new(self.precision * factor, self.shift * factor)
    }
    fn zero_like(&self) -> Self {
        Self::ZERO
    }
    fn all_finite(&self) -> bool {
        self.precision.is_finite() && self.shift.is_finite()
    }
    fn max_rel_diff(&self, other: &Self) -> f64 {
        let dp = (self.precision - other.precision).abs() / (1.0 + other.precision.abs());
        let ds = (self.shift - other.shift).abs() / (1.0 + other.shift.abs());
        dp.max(ds)
    }
    fn density_ok(&self, floor: f64) -> bool {
        self.precision.is_finite() && self.shift.is_finite() && self.precision > floor
    }
}

/// Natural parameters (Q, r) of exp(-½xᵀQx + rᵀx). Q is symmetrized on
/// construction; asymmetry larger than the tolerance is an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalParamsND {
    precision: DMatrix<f64>,
    shift: DVector<f64>,
}

impl NaturalParamsND {
    pub fn new(precision: DMatrix<f64>, shift: DVector<f64>) -> Result<Self, ExpFamError> {
        if precision.nrows() != precision.ncols() {
            return Err(ExpFamError::DimensionMismatch(precision.nrows(), precision.ncols()));
        }
        if precision.nrows() != shift.len() {
            return Err(ExpFamError::DimensionMismatch(precision.nrows(), shift.len()));
        }
        let scale = precision.amax().max(1.0);
        let asym = (&precision - precision.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(ExpFamError::Asymmetric(asym));
        }
        let sym = (&precision + precision.transpose()) * 0.5;
        Ok(Self { precision: sym, shift })
    }

    pub fn zero(dim: usize) -> Self {
        Self { precision: DMatrix::zeros(dim, dim), shift: DVector::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn precision_matrix(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn shift_vector(&self) -> &DVector<f64> {
        &self.shift
    }
}

impl NaturalParams for NaturalParamsND {
    fn add(&self, other: &Self) -> Self {
        Self { precision: &self.precision + &other.precision, shift: &self.shift + &other.shift }
    }
    fn sub(&self, other: &Self) -> Self {
        Self { precision: &self.precision - &other.precision, shift: &self.shift - &other.shift }
    }
    fn scale(&self, factor: f64) -> Self {
        Self { precision: &self.precision * factor, shift: &self.shift * factor }
    }
    fn zero_like(&self) -> Self {
        Self::zero(self.dim())
    }
    fn all_finite(&self) -> bool {
        self.precision.iter().all(|v| v.is_finite()) && self.shift.iter().all(|v| v.is_finite())
    }
    fn max_rel_diff(&self, other: &Self) -> f64 {
        let mut d = 0.0f64;
        for (a, b) in self.precision.iter().zip(other.precision.iter()) {
            d = d.max((a - b).abs() / (1.0 + b.abs()));
        }
        for (a, b) in self.shift.iter().zip(other.shift.iter()) {
            d = d.max((a - b).abs() / (1.0 + b.abs()));
        }
        d
    }
    fn density_ok(&self, _floor: f64) -> bool {
        self.all_finite() && Cholesky::new(self.precision.clone()).is_some()
    }
}

/// Cavity algebra: componentwise subtraction, result unconstrained in sign.
pub fn cavity_subtract<P: NaturalParams>(total: &P, part: &P) -> P {
    total.sub(part)
}

/// A proper 1D Gaussian density: precision strictly positive, moments finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianDensity1D {
    params: NaturalParams1D,
}

impl GaussianDensity1D {
    pub fn new(params: NaturalParams1D) -> Result<Self, ExpFamError> {
        if !params.precision.is_finite() || params.precision <= 0.0 {
            return Err(ExpFamError::InvalidPrecision(params.precision));
        }
        if !params.shift.is_finite() {
            return Err(ExpFamError::NonFinite);
        }
        Ok(Self { params })
    }

    /// Standard normal N(0, 1).
    pub fn standard() -> Self {
        Self { params: NaturalParams1D::new(1.0, 0.0) }
    }

    pub fn params(&self) -> NaturalParams1D {
        self.params
    }

    pub fn mean(&self) -> f64 {
        self.params.shift / self.params.precision
    }

    pub fn variance(&self) -> f64 {
        1.0 / self.params.precision
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Log-density at x (normalized).
    pub fn ln_pdf(&self, x: f64) -> f64 {
        -0.5 * self.params.precision * x * x + self.params.shift * x - self.params.log_normalizer()
    }
}

/// Moment map η = ∇φ(λ): (β, r) → (μ, v) = (r/β, 1/β).
pub fn to_moments(g: &GaussianDensity1D) -> (f64, f64) {
    (g.mean(), g.variance())
}

/// Inverse link ∇φ⁻¹: (μ, v) → (β, r) = (1/v, μ/v). Rejects v ≤ 0.
pub fn from_moments(mean: f64, variance: f64) -> Result<GaussianDensity1D, ExpFamError> {
    if !variance.is_finite() || variance <= 0.0 {
        return Err(ExpFamError::NonPositiveVariance(variance));
    }
    if !mean.is_finite() {
        return Err(ExpFamError::NonFinite);
    }
    let precision = 1.0 / variance;
    GaussianDensity1D::new(NaturalParams1D::new(precision, mean * precision))
}

/// KL(q1 ‖ q2) = ½[β₂(μ₁-μ₂)² + (β₂-β₁)/β₁ - log(β₂/β₁)].
///
/// Written as ½[β₂Δμ² + (t - ln(1+t))] with t = (β₂-β₁)/β₁, which is the same
/// expression but nonnegative term by term, and exactly zero when q1 = q2.
pub fn kl_gaussian(q1: &GaussianDensity1D, q2: &GaussianDensity1D) -> f64 {
    let b1 = q1.params.precision;
    let b2 = q2.params.precision;
    let dmu = q1.mean() - q2.mean();
    let t = (b2 - b1) / b1;
    0.5 * (b2 * dmu * dmu + (t - t.ln_1p()))
}

/// A proper ND Gaussian density; validity is checked by a symmetric
/// positive-definite factorization of the precision matrix, whose failure is
/// a typed error (EP iterations can transiently produce indefinite precision
/// and the caller decides policy).
#[derive(Debug, Clone)]
pub struct GaussianDensityND {
    params: NaturalParamsND,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianDensityND {
    pub fn new(params: NaturalParamsND) -> Result<Self, ExpFamError> {
        if !params.all_finite() {
            return Err(ExpFamError::NonFinite);
        }
        let chol = Cholesky::new(params.precision.clone()).ok_or(ExpFamError::NotPositiveDefinite)?;
        Ok(Self { params, chol })
    }

    /// Standard normal N(0, I_d).
    pub fn standard(dim: usize) -> Self {
        let params = NaturalParamsND::new(DMatrix::identity(dim, dim), DVector::zeros(dim))
            .expect("identity precision is symmetric");
        Self::new(params).expect("identity precision is positive definite")
    }

    pub fn params(&self) -> &NaturalParamsND {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.chol.solve(&self.params.shift)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn ln_det_precision(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solve Q x = b against the cached factorization.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }
}

/// Build an ND density from moment parameters (mean, covariance).
pub fn from_moments_nd(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<GaussianDensityND, ExpFamError> {
    let sym = (cov + cov.transpose()) * 0.5;
    let chol = Cholesky::new(sym).ok_or(ExpFamError::CovarianceNotPositiveDefinite)?;
    let precision = chol.inverse();
    let shift = &precision * mean;
    GaussianDensityND::new(NaturalParamsND::new(precision, shift)?)
}

/// ND KL: ½[(μ₁-μ₂)ᵀQ₂(μ₁-μ₂) + Tr(Q₂Q₁⁻¹) - d - log(|Q₂|/|Q₁|)].
///
/// Mathematically nonnegative; rounding can leave dust of order -1e-15 for
/// nearly identical inputs, which is clamped to zero so Pinsker's bound stays
/// applicable downstream.
pub fn kl_gaussian_nd(q1: &GaussianDensityND, q2: &GaussianDensityND) -> Result<f64, ExpFamError> {
    let d = q1.dim();
    if d != q2.dim() {
        return Err(ExpFamError::DimensionMismatch(d, q2.dim()));
    }
    let dmu = q1.mean() - q2.mean();
    let quad = (q2.params.precision_matrix() * &dmu).dot(&dmu);
    // Tr(Q₂Q₁⁻¹) = Tr(Q₁⁻¹Q₂) via the cached factorization of Q₁
    let trace = q1.chol.solve(q2.params.precision_matrix()).trace();
    let ln_det_ratio = q2.ln_det_precision() - q1.ln_det_precision();
    let kl = 0.5 * (quad + trace - d as f64 - ln_det_ratio);
    if kl < 0.0 {
        if kl < -1e-10 {
            return Err(ExpFamError::NegativeKl(kl));
        }
        return Ok(0.0);
    }
    Ok(kl)
}

/// Pinsker: KL ≥ 2·d_TV², so d_TV ≤ √(KL/2).
pub fn tv_upper_bound(kl: f64) -> Result<f64, ExpFamError> {
    if !(kl >= 0.0) {
        return Err(ExpFamError::NegativeKl(kl));
    }
    Ok((kl / 2.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn to_moments_identities() {
        let g = GaussianDensity1D::new(NaturalParams1D::new(1.0, 0.0)).unwrap();
        assert_eq!(to_moments(&g), (0.0, 1.0));
        let g = GaussianDensity1D::new(NaturalParams1D::new(4.0, 2.0)).unwrap();
        assert_eq!(to_moments(&g), (0.5, 0.25));
        let g = GaussianDensity1D::new(NaturalParams1D::new(100.0, 0.0)).unwrap();
        assert_eq!(to_moments(&g), (0.0, 0.01));
    }

    #[test]
    fn from_moments_identities_and_errors() {
        let g = from_moments(0.0, 1.0).unwrap();
        assert_eq!(g.params(), NaturalParams1D::new(1.0, 0.0));
        let g = from_moments(0.5, 0.25).unwrap();
        assert_eq!(g.params(), NaturalParams1D::new(4.0, 2.0));
        assert!(matches!(from_moments(0.0, 0.0), Err(ExpFamError::NonPositiveVariance(_))));
        assert!(matches!(from_moments(0.0, -1.0), Err(ExpFamError::NonPositiveVariance(_))));
        assert!(GaussianDensity1D::new(NaturalParams1D::new(-2.0, 0.0)).is_err());
    }

    #[test]
    fn from_to_moments_round_trips() {
        // seeded scan; the proptest version lives in tests/invariants.rs
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100 {
            let mean = 20.0 * next() - 10.0;
            let variance = 10f64.powf(4.0 * next() - 2.0);
            let g = from_moments(mean, variance).unwrap();
            let (m, v) = to_moments(&g);
            assert_relative_eq!(m, mean, max_relative = 1e-12, epsilon = 1e-14);
            assert_relative_eq!(v, variance, max_relative = 1e-12);
        }
    }

    #[test]
    fn kl_gaussian_reference_values() {
        let std = GaussianDensity1D::standard();
        assert_eq!(kl_gaussian(&std, &std), 0.0);
        let q1 = from_moments(1.0, 1.0).unwrap();
        assert_relative_eq!(kl_gaussian(&q1, &std), 0.5, max_relative = 1e-15);
        // ½[(1-0.5)/0.5 - log 2]
        let q1 = from_moments(0.0, 2.0).unwrap();
        assert_relative_eq!(kl_gaussian(&q1, &std), 0.5 * (1.0 - 2f64.ln()), max_relative = 1e-14);
    }

    #[test]
    fn kl_nd_matches_sum_of_1d_for_diagonal() {
        let q1 = from_moments_nd(
            &DVector::from_vec(vec![0.3, -1.0]),
            &DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5])),
        )
        .unwrap();
        let q2 = GaussianDensityND::standard(2);
        let kl = kl_gaussian_nd(&q1, &q2).unwrap();
        let kl1 = kl_gaussian(&from_moments(0.3, 2.0).unwrap(), &GaussianDensity1D::standard());
        let kl2 = kl_gaussian(&from_moments(-1.0, 0.5).unwrap(), &GaussianDensity1D::standard());
        assert_relative_eq!(kl, kl1 + kl2, max_relative = 1e-12);
        assert_eq!(kl_gaussian_nd(&q2, &q2).unwrap(), 0.0);
    }

    #[test]
    fn kl_nd_dimension_mismatch_is_error() {
        let a = GaussianDensityND::standard(2);
        let b = GaussianDensityND::standard(3);
        assert!(matches!(kl_gaussian_nd(&a, &b), Err(ExpFamError::DimensionMismatch(2, 3))));
    }

    #[test]
    fn tv_bound_values_and_domain() {
        assert_eq!(tv_upper_bound(0.0).unwrap(), 0.0);
        assert_eq!(tv_upper_bound(2.0).unwrap(), 1.0);
        assert_eq!(tv_upper_bound(0.5).unwrap(), 0.5);
        assert!(tv_upper_bound(-1e-3).is_err());
    }

    #[test]
    fn cavity_algebra() {
        let total = NaturalParams1D::new(10.0, 1.0);
        let part = NaturalParams1D::new(2.0, 0.5);
        assert_eq!(cavity_subtract(&total, &part), NaturalParams1D::new(8.0, 0.5));
        assert_eq!(cavity_subtract(&total, &NaturalParams1D::ZERO), total);
        // aEP cavity: λ_c = ((n-1)/n) λ_s with n = 5
        let aep = NaturalParams1D::new(10.0, 5.0).scale(4.0 / 5.0);
        assert_eq!(aep, NaturalParams1D::new(8.0, 4.0));
    }

    #[test]
    fn nd_params_symmetrize_or_reject() {
        let almost = DMatrix::from_row_slice(2, 2, &[2.0, 0.1 + 1e-14, 0.1, 1.0]);
        let p = NaturalParamsND::new(almost, DVector::zeros(2)).unwrap();
        assert_eq!(p.precision_matrix()[(0, 1)], p.precision_matrix()[(1, 0)]);
        let skew = DMatrix::from_row_slice(2, 2, &[2.0, 0.2, 0.1, 1.0]);
        assert!(matches!(
            NaturalParamsND::new(skew, DVector::zeros(2)),
            Err(ExpFamError::Asymmetric(_))
        ));
    }

    #[test]
    fn nd_density_rejects_indefinite_precision() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let params = NaturalParamsND::new(q, DVector::zeros(2)).unwrap();
        assert!(matches!(GaussianDensityND::new(params), Err(ExpFamError::NotPositiveDefinite)));
    }

    #[test]
    fn nd_mean_and_covariance() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = DVector::from_vec(vec![1.0, -0.5]);
        let g = GaussianDensityND::new(NaturalParamsND::new(q.clone(), r.clone()).unwrap()).unwrap();
        let mu = g.mean();
        assert_relative_eq!((&q * &mu - r).amax(), 0.0, epsilon = 1e-14);
        let cov = g.covariance();
        assert_relative_eq!((&q * &cov - DMatrix::identity(2, 2)).amax(), 0.0, epsilon = 1e-13);
    }
}
