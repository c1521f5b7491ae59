//! Synthetic datasets for the regression and mixture experiments.
//!
//! Regressors are the four cubic B-spline basis functions on [0,1] (open
//! uniform knot vector, Cox–de Boor recursion) evaluated at n equispaced
//! locations; responses come from the declared noise model. Everything is
//! deterministic per seed: one ChaCha stream per dataset.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of B-spline basis functions (= regression parameters).
pub const N_BASIS: usize = 4;

const DEGREE: usize = 3;
// open uniform knot vector on [0,1] for 4 cubic basis functions
const KNOTS: [f64; 8] = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("need at least {N_BASIS} locations (one per basis function), got {0}")]
    TooFewPoints(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionModel {
    /// yᵢ = sign(xᵢᵀα + ε), ε ~ N(0,1)
    Probit,
    /// yᵢ = xᵢᵀα + ε, ε ~ Cauchy(0,1)
    Cauchy,
}

impl std::fmt::Display for RegressionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RegressionModel::Probit => write!(f, "probit"),
            RegressionModel::Cauchy => write!(f, "cauchy"),
        }
    }
}

/// A generated regression dataset; serializes to the reproducibility JSON
/// document {model, seed, n, alpha_true, regressors, responses}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionDataset {
    pub model: RegressionModel,
    pub seed: u64,
    pub n: usize,
    pub alpha_true: Vec<f64>,
    pub regressors: Vec<Vec<f64>>,
    pub responses: Vec<f64>,
}

impl RegressionDataset {
    pub fn regressor(&self, i: usize) -> DVector<f64> {
        DVector::from_vec(self.regressors[i].clone())
    }
}

/// Cubic B-spline basis values at t ∈ [0,1] by the Cox–de Boor recursion on
/// the open uniform knot vector; the right endpoint closes the last span.
/// Rows form a partition of unity.
pub fn bspline_basis(t: f64) -> [f64; N_BASIS] {
    debug_assert!((0.0..=1.0).contains(&t));
    let m = KNOTS.len() - 1;
    // degree-0 indicators, half-open spans except the last nonempty one
    let mut n = [0.0f64; 7];
    for (i, slot) in n.iter_mut().enumerate() {
        let closes = KNOTS[i + 1] >= 1.0;
        if (KNOTS[i] <= t && t < KNOTS[i + 1]) || (closes && KNOTS[i] <= t && t <= KNOTS[i + 1] && KNOTS[i] < KNOTS[i + 1]) {
            *slot = 1.0;
        }
    }
    for p in 1..=DEGREE {
        for i in 0..(m - p) {
            let left_den = KNOTS[i + p] - KNOTS[i];
            let right_den = KNOTS[i + p + 1] - KNOTS[i + 1];
            let left = if left_den > 0.0 { (t - KNOTS[i]) / left_den * n[i] } else { 0.0 };
            let right = if right_den > 0.0 { (KNOTS[i + p + 1] - t) / right_den * n[i + 1] } else { 0.0 };
            n[i] = left + right;
        }
    }
    [n[0], n[1], n[2], n[3]]
}

/// Generate a regression dataset: true α ~ N(0, I₄) drawn once, regressors
/// the B-spline basis at n equispaced locations in [0,1], responses from the
/// model's noise. Deterministic per seed.
pub fn generate_regression_data(
    model: RegressionModel,
    n: usize,
    seed: u64,
) -> Result<RegressionDataset, DataError> {
    if n < N_BASIS {
        return Err(DataError::TooFewPoints(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha: Vec<f64> = (0..N_BASIS).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut regressors = Vec::with_capacity(n);
    let mut responses = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        let x = bspline_basis(t);
        let lin: f64 = x.iter().zip(&alpha).map(|(a, b)| a * b).sum();
        let y = match model {
            RegressionModel::Probit => {
                let eps: f64 = StandardNormal.sample(&mut rng);
                if lin + eps >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            RegressionModel::Cauchy => {
                let eps: f64 = Cauchy::new(0.0, 1.0).unwrap().sample(&mut rng);
                lin + eps
            }
        };
        regressors.push(x.to_vec());
        responses.push(y);
    }
    Ok(RegressionDataset { model, seed, n, alpha_true: alpha, regressors, responses })
}

/// n draws from the two-component mixture ½N(means[0],1) + ½N(means[1],1),
/// deterministic per seed.
pub fn generate_mixture_data(n: usize, means: [f64; 2], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let m = if rng.gen_bool(0.5) { means[0] } else { means[1] };
            let eps: f64 = StandardNormal.sample(&mut rng);
            m + eps
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bspline_matches_bernstein_cubics() {
        // with the open uniform knot vector the four basis functions are the
        // cubic Bernstein polynomials
        for i in 0..=50 {
            let t = i as f64 / 50.0;
            let b = bspline_basis(t);
            let u = 1.0 - t;
            let expect = [u * u * u, 3.0 * t * u * u, 3.0 * t * t * u, t * t * t];
            for (got, want) in b.iter().zip(expect) {
                assert!((got - want).abs() < 1e-14, "t={t}: {b:?} vs {expect:?}");
            }
            let sum: f64 = b.iter().sum();
            assert!((sum - 1.0).abs() < 1e-14);
        }
        assert_eq!(bspline_basis(1.0), [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn regression_data_is_deterministic_and_valid() {
        let a = generate_regression_data(RegressionModel::Probit, 30, 99).unwrap();
        let b = generate_regression_data(RegressionModel::Probit, 30, 99).unwrap();
        assert_eq!(a.responses, b.responses);
        assert_eq!(a.alpha_true, b.alpha_true);
        assert!(a.responses.iter().all(|y| *y == 1.0 || *y == -1.0));
        for row in &a.regressors {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let c = generate_regression_data(RegressionModel::Probit, 30, 100).unwrap();
        assert_ne!(a.responses, c.responses);
        assert!(matches!(generate_regression_data(RegressionModel::Cauchy, 3, 1), Err(DataError::TooFewPoints(3))));
    }

    #[test]
    fn mixture_data_statistics() {
        let ys = generate_mixture_data(20, [0.0, -2.5], 7);
        assert_eq!(ys.len(), 20);
        assert_eq!(ys, generate_mixture_data(20, [0.0, -2.5], 7));
        // population mean -1.25, population variance 1 + 1.5625
        let mean: f64 = ys.iter().sum::<f64>() / 20.0;
        let sd_of_mean = (2.5625f64 / 20.0).sqrt();
        assert!((mean + 1.25).abs() <= 4.0 * sd_of_mean, "sample mean {mean}");
        assert_eq!(generate_mixture_data(1, [0.0, 0.0], 3).len(), 1);
    }

    #[test]
    fn dataset_serializes_to_schema() {
        let d = generate_regression_data(RegressionModel::Cauchy, 5, 42).unwrap();
        let json = serde_json::to_value(&d).unwrap();
        for key in ["model", "seed", "n", "alpha_true", "regressors", "responses"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["model"], "cauchy");
        let back: RegressionDataset = serde_json::from_value(json).unwrap();
        assert_eq!(back.responses, d.responses);
    }
}
