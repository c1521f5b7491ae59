//! Site (factor) models: negative log-likelihoods φᵢ with analytic
//! derivatives and optional regularity metadata (curvature range B, bounds
//! K₃/K₄ on the third and fourth log-derivatives).
//!
//! The metadata is advisory: consumers use it to predict error constants when
//! present but never require it. Every built-in site must survive the
//! finite-difference derivative audit in [`audit`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::stable::{ln_normal_cdf, ln_normal_pdf, log_sum_exp, logistic, inverse_mills, softplus};

pub mod audit;
pub mod data;

pub use data::{generate_mixture_data, generate_regression_data, DataError, RegressionDataset, RegressionModel};

type Scalar = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type VecFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type HessFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// A 1D site: φ = -log(likelihood) with derivatives up to order two
/// (optionally three and four) and regularity metadata.
#[derive(Clone)]
pub struct SiteModel1D {
    name: String,
    phi: Scalar,
    d1: Scalar,
    d2: Scalar,
    d3: Option<Scalar>,
    d4: Option<Scalar>,
    curvature_range: Option<f64>,
    k3: Option<f64>,
    k4: Option<f64>,
}

impl std::fmt::Debug for SiteModel1D {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SiteModel1D").field("name", &self.name).finish()
    }
}

impl SiteModel1D {
    pub fn new(
        name: impl Into<String>,
        phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d1: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            phi: Arc::new(phi),
            d1: Arc::new(d1),
            d2: Arc::new(d2),
            d3: None,
            d4: None,
            curvature_range: None,
            k3: None,
            k4: None,
        }
    }

    pub fn with_d3(mut self, d3: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.d3 = Some(Arc::new(d3));
        self
    }

    pub fn with_d4(mut self, d4: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.d4 = Some(Arc::new(d4));
        self
    }

    pub fn with_regularity(mut self, curvature_range: f64, k3: f64, k4: f64) -> Self {
        self.curvature_range = Some(curvature_range);
        self.k3 = Some(k3);
        self.k4 = Some(k4);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// φ(x), the negative log-likelihood.
    pub fn phi(&self, x: f64) -> f64 {
        (self.phi)(x)
    }

    /// φ′(x)
    pub fn d1(&self, x: f64) -> f64 {
        (self.d1)(x)
    }

    /// φ″(x)
    pub fn d2(&self, x: f64) -> f64 {
        (self.d2)(x)
    }

    pub fn d3(&self, x: f64) -> Option<f64> {
        self.d3.as_ref().map(|f| f(x))
    }

    pub fn d4(&self, x: f64) -> Option<f64> {
        self.d4.as_ref().map(|f| f(x))
    }

    /// B: bound on max φ″ - min φ″, when known.
    pub fn curvature_range(&self) -> Option<f64> {
        self.curvature_range
    }

    /// K₃: bound on |φ⁽³⁾|, when known.
    pub fn k3(&self) -> Option<f64> {
        self.k3
    }

    /// K₄: bound on |φ⁽⁴⁾|, when known.
    pub fn k4(&self) -> Option<f64> {
        self.k4
    }
}

/// An ND site: φ with gradient and Hessian.
#[derive(Clone)]
pub struct SiteModelND {
    name: String,
    dim: usize,
    phi: VecFn,
    grad: GradFn,
    hess: HessFn,
}

impl std::fmt::Debug for SiteModelND {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SiteModelND").field("name", &self.name).field("dim", &self.dim).finish()
    }
}

impl SiteModelND {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        phi: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        hess: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), dim, phi: Arc::new(phi), grad: Arc::new(grad), hess: Arc::new(hess) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn phi(&self, x: &DVector<f64>) -> f64 {
        (self.phi)(x)
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.grad)(x)
    }

    pub fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.hess)(x)
    }
}

/// Gaussian site l(x) = exp(-(γ/2)x² + αx), so φ(x) = (γ/2)x² - αx.
/// γ = α = 0 is the unit site (φ ≡ 0). The EP update of this site is exactly
/// (βᵢ, rᵢ) = (γ, α) against any cavity.
pub fn gaussian_site(gamma: f64, alpha: f64) -> SiteModel1D {
    SiteModel1D::new(
        format!("gaussian(gamma={gamma},alpha={alpha})"),
        move |x| 0.5 * gamma * x * x - alpha * x,
        move |x| gamma * x - alpha,
        move |_| gamma,
    )
    .with_d3(|_| 0.0)
    .with_d4(|_| 0.0)
    .with_regularity(0.0, 0.0, 0.0)
}

/// Logit site: φ(x) = log(1 + e^{-x}), the negative log of the logistic
/// likelihood. φ′(0) = -½, φ″(0) = ¼.
pub fn logit_site() -> SiteModel1D {
    SiteModel1D::new(
        "logit",
        |x| softplus(-x),
        |x| -logistic(-x),
        |x| logistic(x) * logistic(-x),
    )
    .with_d3(|x| {
        let s = logistic(x);
        s * (1.0 - s) * (1.0 - 2.0 * s)
    })
    .with_d4(|x| {
        let s = logistic(x);
        s * (1.0 - s) * (1.0 - 6.0 * s + 6.0 * s * s)
    })
    // max|φ⁽³⁾| = 1/(6√3), max|φ⁽⁴⁾| = 1/8, φ″ ∈ (0, ¼]
    .with_regularity(0.25, 1.0 / (6.0 * 3f64.sqrt()), 0.125)
}

/// Double-logistic site l(x) = (1+e^{sx})⁻¹(1+e^{-sx})⁻¹:
/// φ(x) = softplus(sx) + softplus(-sx), an even function with exponential
/// tails where φ″ is very small.
pub fn double_logistic_site(scale: f64) -> SiteModel1D {
    assert!(scale > 0.0, "double_logistic_site requires scale > 0");
    let s = scale;
    SiteModel1D::new(
        format!("double_logistic(scale={s})"),
        move |x| softplus(s * x) + softplus(-s * x),
        move |x| s * (2.0 * logistic(s * x) - 1.0),
        move |x| 2.0 * s * s * logistic(s * x) * logistic(-s * x),
    )
    .with_d3(move |x| {
        let sig = logistic(s * x);
        2.0 * s * s * s * sig * (1.0 - sig) * (1.0 - 2.0 * sig)
    })
    .with_d4(move |x| {
        let sig = logistic(s * x);
        2.0 * s.powi(4) * sig * (1.0 - sig) * (1.0 - 6.0 * sig + 6.0 * sig * sig)
    })
    .with_regularity(0.5 * s * s, 2.0 * s.powi(3) / (6.0 * 3f64.sqrt()), 0.25 * s.powi(4))
}

/// Probit site in the linear predictor a: φ(a) = -log Φ(y·a) with y ∈ {-1,+1}.
/// Lifted to ND by [`compose_linear`]. Uses the stable log-CDF, which switches
/// to an asymptotic expansion for y·a < -8.
pub fn probit_site(y: f64) -> SiteModel1D {
    assert!(y == 1.0 || y == -1.0, "probit_site requires y in {{-1,+1}}");
    SiteModel1D::new(
        format!("probit(y={y})"),
        move |a| -ln_normal_cdf(y * a),
        move |a| -y * inverse_mills(y * a),
        move |a| {
            let z = y * a;
            let lam = inverse_mills(z);
            lam * (lam + z)
        },
    )
    .with_d3(move |a| {
        let z = y * a;
        let lam = inverse_mills(z);
        y * lam * (1.0 - (lam + z) * (2.0 * lam + z))
    })
}

/// Cauchy site in the linear predictor: φ(a) = log(1+(y-a)²) + log π.
///
/// With u = a - y: φ″ = 2(1-u²)/(1+u²)², which is +2 at the center (φ has its
/// minimum there) and dips to -¼ at |u| = √3, so the site is not log-concave;
/// the full range of φ″ has width 2.25.
pub fn cauchy_site(y: f64) -> SiteModel1D {
    SiteModel1D::new(
        format!("cauchy(y={y})"),
        move |a| {
            let u = a - y;
            (1.0 + u * u).ln() + std::f64::consts::PI.ln()
        },
        move |a| {
            let u = a - y;
            2.0 * u / (1.0 + u * u)
        },
        move |a| {
            let u = a - y;
            let d = 1.0 + u * u;
            2.0 * (1.0 - u * u) / (d * d)
        },
    )
    .with_d3(move |a| {
        let u = a - y;
        let d = 1.0 + u * u;
        4.0 * u * (u * u - 3.0) / (d * d * d)
    })
    .with_d4(move |a| {
        let u = a - y;
        let d = 1.0 + u * u;
        -12.0 * (u.powi(4) - 6.0 * u * u + 1.0) / d.powi(4)
    })
    // numerical bounds: max|φ⁽³⁾| ≈ 2.914, max|φ⁽⁴⁾| = 12 at the center
    .with_regularity(2.25, 3.0, 12.0)
}

/// Shift the input: φ(x) = base(x - center). Regularity metadata is unchanged.
pub fn shift_input(base: SiteModel1D, center: f64) -> SiteModel1D {
    let name = format!("{}@{center}", base.name);
    let b = base.clone();
    let mut site = SiteModel1D::new(
        name,
        {
            let b = b.clone();
            move |x| b.phi(x - center)
        },
        {
            let b = b.clone();
            move |x| b.d1(x - center)
        },
        {
            let b = b.clone();
            move |x| b.d2(x - center)
        },
    );
    if base.d3.is_some() {
        let b = base.clone();
        site = site.with_d3(move |x| b.d3(x - center).unwrap());
    }
    if base.d4.is_some() {
        let b = base.clone();
        site = site.with_d4(move |x| b.d4(x - center).unwrap());
    }
    site.curvature_range = base.curvature_range;
    site.k3 = base.k3;
    site.k4 = base.k4;
    site
}

/// Rescale the input: φ(x) = base(c·x); the d-th derivative picks up cᵈ and
/// so does the metadata.
pub fn scale_input(base: SiteModel1D, c: f64) -> SiteModel1D {
    let name = format!("{}*{c}", base.name);
    let b = base.clone();
    let mut site = SiteModel1D::new(
        name,
        {
            let b = b.clone();
            move |x| b.phi(c * x)
        },
        {
            let b = b.clone();
            move |x| c * b.d1(c * x)
        },
        {
            let b = b.clone();
            move |x| c * c * b.d2(c * x)
        },
    );
    if base.d3.is_some() {
        let b = base.clone();
        site = site.with_d3(move |x| c.powi(3) * b.d3(c * x).unwrap());
    }
    if base.d4.is_some() {
        let b = base.clone();
        site = site.with_d4(move |x| c.powi(4) * b.d4(c * x).unwrap());
    }
    site.curvature_range = base.curvature_range.map(|v| v * c * c);
    site.k3 = base.k3.map(|v| v * c.abs().powi(3));
    site.k4 = base.k4.map(|v| v * c.powi(4));
    site
}

/// Lift a 1D site into ND through a linear predictor: φ(x) = φ₁(vᵀx),
/// grad = φ₁′(vᵀx)·v, hess = φ₁″(vᵀx)·vvᵀ (rank one for v ≠ 0).
pub fn compose_linear(site_1d: SiteModel1D, regressor: DVector<f64>) -> SiteModelND {
    assert!(regressor.iter().all(|v| v.is_finite()), "regressor must be finite");
    let dim = regressor.len();
    let name = format!("{}∘linear", site_1d.name);
    let s1 = site_1d.clone();
    let v1 = regressor.clone();
    let s2 = site_1d.clone();
    let v2 = regressor.clone();
    let s3 = site_1d;
    let v3 = regressor;
    SiteModelND::new(
        name,
        dim,
        move |x| s1.phi(v1.dot(x)),
        move |x| &v2 * s2.d1(v2.dot(x)),
        move |x| {
            let outer = &v3 * v3.transpose();
            outer * s3.d2(v3.dot(x))
        },
    )
}

/// Two-component Gaussian-mixture site in 2D:
/// φ(x₁,x₂) = -log[½N(y;x₁,1) + ½N(y;x₂,1)], with log-sum-exp stabilization
/// and gradient/Hessian via the component responsibilities.
pub fn mixture_site_2d(y: f64) -> SiteModelND {
    let log_weights = move |x: &DVector<f64>| -> (f64, [f64; 2], [f64; 2]) {
        let g = [ln_normal_pdf(y - x[0]), ln_normal_pdf(y - x[1])];
        let half = 0.5f64.ln();
        let ls = log_sum_exp(half + g[0], half + g[1]);
        let w = [(half + g[0] - ls).exp(), (half + g[1] - ls).exp()];
        (ls, g, w)
    };
    SiteModelND::new(
        format!("mixture2d(y={y})"),
        2,
        move |x| -log_weights(x).0,
        move |x| {
            let (_, _, w) = log_weights(x);
            DVector::from_vec(vec![-w[0] * (y - x[0]), -w[1] * (y - x[1])])
        },
        move |x| {
            let (_, _, w) = log_weights(x);
            let e = [y - x[0], y - x[1]];
            let mut h = DMatrix::zeros(2, 2);
            for j in 0..2 {
                for k in 0..2 {
                    let mut v = w[j] * w[k] * e[j] * e[k];
                    if j == k {
                        v += w[j] * (1.0 - e[j] * e[j]);
                    }
                    h[(j, k)] = v;
                }
            }
            h
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gaussian_site_values() {
        let s = gaussian_site(1.0, 0.0);
        assert_eq!(s.phi(2.0), 2.0);
        assert_eq!(s.d1(2.0), 2.0);
        assert_eq!(s.d2(2.0), 1.0);
        let unit = gaussian_site(0.0, 0.0);
        assert_eq!(unit.phi(1.7), 0.0);
        assert_eq!(unit.d1(-3.0), 0.0);
    }

    #[test]
    fn logit_site_values() {
        let s = logit_site();
        assert_eq!(s.d1(0.0), -0.5);
        assert_eq!(s.d2(0.0), 0.25);
        // φ(-40) = 40 + log1p(e^{-40}) ≈ 40 with no overflow
        let v = s.phi(-40.0);
        assert!(v.is_finite());
        assert!((v - 40.0).abs() < 1e-12);
    }

    #[test]
    fn double_logistic_values() {
        let s = double_logistic_site(5.0);
        assert_eq!(s.d1(0.0), 0.0);
        assert_relative_eq!(s.d2(0.0), 12.5, max_relative = 1e-14);
        assert!(s.d2(10.0) < 1e-3);
        // exactly even
        for x in [-7.3, -2.0, -0.1, 0.4, 3.9, 9.0] {
            assert_eq!(s.phi(x), s.phi(-x));
        }
    }

    #[test]
    fn probit_site_values() {
        for y in [1.0, -1.0] {
            let s = probit_site(y);
            assert_relative_eq!(s.phi(0.0), 2f64.ln(), max_relative = 1e-14);
        }
        let s = probit_site(1.0);
        assert_relative_eq!(s.d1(0.0), -0.7978845608028653558799, max_relative = 1e-13);
        // log-concave on the audit window
        for i in 0..=160 {
            let a = -8.0 + i as f64 * 0.1;
            assert!(s.d2(a) > 0.0, "phi''({a}) = {}", s.d2(a));
        }
    }

    #[test]
    fn cauchy_site_values() {
        let s = cauchy_site(0.0);
        // minimum at a = y with curvature +2
        assert_relative_eq!(s.phi(0.0), std::f64::consts::PI.ln(), max_relative = 1e-15);
        assert_eq!(s.d2(0.0), 2.0);
        // range of φ″ over a dense grid: [-1/4, 2], width ≤ B = 2.25
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..=20_000 {
            let a = -10.0 + i as f64 * 0.001;
            let c = s.d2(a);
            lo = lo.min(c);
            hi = hi.max(c);
        }
        assert_relative_eq!(lo, -0.25, max_relative = 1e-6);
        assert_relative_eq!(hi, 2.0, max_relative = 1e-12);
        assert!(hi - lo <= 2.25 + 1e-12);
        // not log-concave: the audit grid contains a point with φ″ < -0.1
        assert!(s.d2(2.0) < -0.1);
    }

    #[test]
    fn shift_and_scale_combinators() {
        let s = shift_input(logit_site(), 1.5);
        assert_eq!(s.d1(1.5), -0.5);
        let sc = scale_input(logit_site(), -2.0);
        assert_eq!(sc.phi(1.0), logit_site().phi(-2.0));
        assert_relative_eq!(sc.d2(0.0), 4.0 * 0.25, max_relative = 1e-15);
        assert_eq!(sc.k4(), Some(16.0 * 0.125));
    }

    #[test]
    fn compose_linear_matches_1d_on_basis_vector() {
        let v = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let nd = compose_linear(logit_site(), v);
        let x = DVector::from_vec(vec![0.7, -3.0, 2.0]);
        assert_eq!(nd.phi(&x), logit_site().phi(0.7));
        let g = nd.grad(&x);
        assert_eq!(g[0], logit_site().d1(0.7));
        assert_eq!(g[1], 0.0);
        let h = nd.hess(&x);
        assert_eq!(h[(0, 0)], logit_site().d2(0.7));
        // rank one: every 2x2 minor vanishes
        let v = DVector::from_vec(vec![0.5, -1.0]);
        let nd = compose_linear(logit_site(), v);
        let h = nd.hess(&DVector::from_vec(vec![0.2, 0.4]));
        assert_relative_eq!(h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn mixture_site_symmetry_and_stationarity() {
        let site = mixture_site_2d(0.8);
        let a = DVector::from_vec(vec![0.3, -1.2]);
        let b = DVector::from_vec(vec![-1.2, 0.3]);
        assert_eq!(site.phi(&a), site.phi(&b));
        let g = site.grad(&DVector::from_vec(vec![0.8, 0.8]));
        assert_relative_eq!(g.amax(), 0.0, epsilon = 1e-14);
    }
}
