//! Finite-difference audit of site derivatives.
//!
//! Every analytic derivative is compared against central differences of φ at
//! seeded random points; the audit is the ground truth for "the derivatives
//! are wired correctly" and backs the derivative-audit CLI command.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{SiteModel1D, SiteModelND};

/// Relative discrepancy allowed between analytic and finite-difference
/// derivatives: |analytic - fd| ≤ tol·(1 + |analytic|).
pub const AUDIT_REL_TOL: f64 = 1e-5;

/// Default audit window for 1D sites.
pub const AUDIT_RANGE_1D: (f64, f64) = (-10.0, 10.0);

#[derive(Debug, Clone, Serialize)]
pub struct AuditFailure {
    pub site: String,
    pub derivative: &'static str,
    pub point: Vec<f64>,
    pub analytic: f64,
    pub finite_difference: f64,
    pub discrepancy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SiteAuditReport {
    pub site: String,
    pub points: usize,
    pub max_discrepancy: f64,
    pub failures: Vec<AuditFailure>,
}

impl SiteAuditReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_disc(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (1.0 + analytic.abs())
}

/// Audit φ′ and φ″ of a 1D site against central differences at `points`
/// seeded random points in `range`.
///
/// Step sizes follow the usual rounding/truncation balance: h ∝ ε^(1/3) for
/// the first derivative, h ∝ ε^(1/4) for the second.
pub fn audit_site_1d(site: &SiteModel1D, points: usize, range: (f64, f64), seed: u64) -> SiteAuditReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut max_disc = 0.0f64;
    for _ in 0..points {
        let x: f64 = rng.gen_range(range.0..range.1);
        let h1 = 6e-6 * (1.0 + x.abs());
        let fd1 = (site.phi(x + h1) - site.phi(x - h1)) / (2.0 * h1);
        let a1 = site.d1(x);
        let disc1 = rel_disc(a1, fd1);
        max_disc = max_disc.max(disc1);
        if disc1 > AUDIT_REL_TOL {
            failures.push(AuditFailure {
                site: site.name().to_string(),
                derivative: "d1",
                point: vec![x],
                analytic: a1,
                finite_difference: fd1,
                discrepancy: disc1,
            });
        }
        let h2 = 1.2e-4 * (1.0 + x.abs());
        let fd2 = (site.phi(x + h2) - 2.0 * site.phi(x) + site.phi(x - h2)) / (h2 * h2);
        let a2 = site.d2(x);
        let disc2 = rel_disc(a2, fd2);
        max_disc = max_disc.max(disc2);
        if disc2 > AUDIT_REL_TOL {
            failures.push(AuditFailure {
                site: site.name().to_string(),
                derivative: "d2",
                point: vec![x],
                analytic: a2,
                finite_difference: fd2,
                discrepancy: disc2,
            });
        }
    }
    SiteAuditReport { site: site.name().to_string(), points, max_discrepancy: max_disc, failures }
}

/// Audit gradient and Hessian of an ND site at seeded random points in
/// [-3, 3]^d (gradient against central differences of φ, Hessian against
/// central differences of the gradient).
pub fn audit_site_nd(site: &SiteModelND, points: usize, seed: u64) -> SiteAuditReport {
    let d = site.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut max_disc = 0.0f64;
    for _ in 0..points {
        let x = DVector::from_fn(d, |_, _| rng.gen_range(-3.0..3.0));
        let grad = site.grad(&x);
        let hess = site.hess(&x);
        for j in 0..d {
            let h1 = 6e-6 * (1.0 + x[j].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h1;
            xm[j] -= h1;
            let fd = (site.phi(&xp) - site.phi(&xm)) / (2.0 * h1);
            let disc = rel_disc(grad[j], fd);
            max_disc = max_disc.max(disc);
            if disc > AUDIT_REL_TOL {
                failures.push(AuditFailure {
                    site: site.name().to_string(),
                    derivative: "grad",
                    point: x.iter().copied().collect(),
                    analytic: grad[j],
                    finite_difference: fd,
                    discrepancy: disc,
                });
            }
            let h2 = 1.2e-4 * (1.0 + x[j].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h2;
            xm[j] -= h2;
            let gp = site.grad(&xp);
            let gm = site.grad(&xm);
            for i in 0..d {
                let fd = (gp[i] - gm[i]) / (2.0 * h2);
                let disc = rel_disc(hess[(i, j)], fd);
                max_disc = max_disc.max(disc);
                if disc > AUDIT_REL_TOL {
                    failures.push(AuditFailure {
                        site: site.name().to_string(),
                        derivative: "hess",
                        point: x.iter().copied().collect(),
                        analytic: hess[(i, j)],
                        finite_difference: fd,
                        discrepancy: disc,
                    });
                }
            }
        }
    }
    SiteAuditReport { site: site.name().to_string(), points, max_discrepancy: max_disc, failures }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sites::{
        cauchy_site, compose_linear, double_logistic_site, gaussian_site, logit_site, mixture_site_2d,
        probit_site, SiteModel1D,
    };

    #[test]
    fn builtin_1d_sites_pass_audit() {
        let sites = [
            gaussian_site(1.7, -0.4),
            logit_site(),
            double_logistic_site(5.0),
            probit_site(1.0),
            probit_site(-1.0),
            cauchy_site(0.3),
        ];
        for site in &sites {
            let report = audit_site_1d(site, 20, AUDIT_RANGE_1D, 7);
            assert!(report.passed(), "{}: {:?}", site.name(), report.failures.first());
        }
    }

    #[test]
    fn builtin_nd_sites_pass_audit() {
        let probit_nd = compose_linear(probit_site(1.0), DVector::from_vec(vec![0.4, -0.2, 0.9]));
        let cauchy_nd = compose_linear(cauchy_site(1.2), DVector::from_vec(vec![0.4, 0.3]));
        for site in [&probit_nd, &cauchy_nd, &mixture_site_2d(-0.7)] {
            let report = audit_site_nd(site, 10, 11);
            assert!(report.passed(), "{}: {:?}", site.name(), report.failures.first());
        }
    }

    #[test]
    fn corrupted_site_fails_audit() {
        // d1 deliberately off by 1e-2
        let bad = SiteModel1D::new("corrupted", |x| 0.5 * x * x, |x| x + 1e-2, |_| 1.0);
        let report = audit_site_1d(&bad, 20, AUDIT_RANGE_1D, 7);
        assert!(!report.passed());
        assert!(report.failures.iter().any(|f| f.derivative == "d1"));
        assert!(report.max_discrepancy > 1e-5);
    }

    #[test]
    fn builtin_log_concavity_classification() {
        // logit, probit, double-logistic, gaussian(γ>0) stay log-concave on an
        // audit grid; cauchy does not.
        let concave = [gaussian_site(0.8, 0.1), logit_site(), double_logistic_site(5.0), probit_site(1.0)];
        for site in &concave {
            for i in 0..=200 {
                let x = -10.0 + i as f64 * 0.1;
                assert!(site.d2(x) >= -1e-12, "{} at {x}", site.name());
            }
        }
        let cauchy = cauchy_site(0.0);
        let violated = (0..=200).any(|i| cauchy.d2(-10.0 + i as f64 * 0.1) < -0.1);
        assert!(violated);
    }
}
