//! Moments of hybrid (tilted) distributions h ∝ q_cavity · l.
//!
//! The reference path is Gauss–Hermite quadrature centered and scaled by the
//! cavity (change of variables x = c + s·√2·t), with up to `expansion_passes`
//! recenter/rescale refinements using the just-computed tilted mean and
//! standard deviation. Moments are accumulated about the quadrature center so
//! that variances of order 1e-6 (cavity precision 1e6) survive without
//! catastrophic cancellation. Closed forms (Gaussian site, probit site,
//! 2D mixture site) are accelerations that the test suite cross-validates
//! against quadrature.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expfam::{
    from_moments, from_moments_nd, GaussianDensity1D, GaussianDensityND, NaturalParams,
    NaturalParams1D, NaturalParamsND,
};
use crate::sites::SiteModel1D;
use crate::stable::{inverse_mills, ln_normal_cdf, log_sum_exp, HALF_LN_2PI};

#[derive(Debug, Error)]
pub enum TiltedError {
    #[error("non-finite integrand for site `{site}` at node x = {node}")]
    NonFiniteIntegrand { site: String, node: f64 },
    #[error("degenerate tilted moments for site `{site}`: variance estimate {variance}")]
    DegenerateMoments { site: String, variance: f64 },
    #[error("hybrid with site `{site}` is not normalizable (posterior precision {precision})")]
    NotNormalizable { site: String, precision: f64 },
    #[error("invalid quadrature config: {0}")]
    BadConfig(String),
    #[error("Brascamp-Lieb bound undefined: phi''(x) + beta <= 0 at x = {node}")]
    BoundUndefined { node: f64 },
    #[error(transparent)]
    ExpFam(#[from] crate::expfam::ExpFamError),
}

/// Where the quadrature envelope is centered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterOn {
    /// Single pass centered on the cavity.
    CavityMean,
    /// Recenter/rescale on the computed tilted moments, up to
    /// `expansion_passes` times or until the center moves < 1e-3 cavity sds.
    Refined,
}

/// Gauss–Hermite quadrature configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    /// Base number of nodes; must be odd and ≥ 11. The rule is escalated
    /// (n → 2n-1, up to [`MAX_ESCALATIONS`] times) until two successive
    /// sizes agree to 1e-9, which sites with poles near the real axis
    /// (Cauchy) need on wide cavities.
    pub nodes: usize,
    /// Maximum number of recenter/rescale refinements after the first pass.
    pub expansion_passes: usize,
    pub center_on: CenterOn,
    /// Required quadrature span in cavity standard deviations; must be ≥ 5
    /// and covered by the node span of the rule.
    pub tail_width: f64,
}

/// Maximum node-count doublings on top of `QuadratureConfig::nodes`.
pub const MAX_ESCALATIONS: usize = 5;

/// Agreement threshold between successive rule sizes.
const ESCALATION_RTOL: f64 = 1e-9;

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { nodes: 61, expansion_passes: 3, center_on: CenterOn::Refined, tail_width: 10.0 }
    }
}

impl QuadratureConfig {
    pub fn new(nodes: usize, expansion_passes: usize, center_on: CenterOn, tail_width: f64) -> Result<Self, TiltedError> {
        let cfg = Self { nodes, expansion_passes, center_on, tail_width };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TiltedError> {
        if self.nodes < 11 || self.nodes % 2 == 0 {
            return Err(TiltedError::BadConfig(format!("nodes must be odd and >= 11, got {}", self.nodes)));
        }
        if !(self.tail_width >= 5.0) {
            return Err(TiltedError::BadConfig(format!("tail_width must be >= 5, got {}", self.tail_width)));
        }
        let rule = hermite_rule(self.nodes);
        let t_max = rule.iter().map(|(t, _)| t.abs()).fold(0.0f64, f64::max);
        let span = std::f64::consts::SQRT_2 * t_max;
        if span < self.tail_width {
            return Err(TiltedError::BadConfig(format!(
                "{} nodes span only {span:.2} cavity sds, below tail_width {}",
                self.nodes, self.tail_width
            )));
        }
        Ok(())
    }
}

/// Moments of a 1D hybrid distribution; `log_z` includes the cavity
/// normalizer, i.e. log ∫ l(x) q_cavity(x) dx with q_cavity normalized.
/// Invariant: variance > 0 and all fields finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltedMoments1D {
    pub log_z: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Moments of an ND hybrid; covariance positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedMomentsND {
    pub log_z: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// The 2D mixture hybrid uses the same layout as any ND hybrid.
pub type TiltedMoments2D = TiltedMomentsND;

/// Shared cache of Gauss–Hermite rules keyed by node count (the Golub–Welsch
/// solve is far more expensive than one tilted-moment evaluation).
fn hermite_rule(nodes: usize) -> Arc<Vec<(f64, f64)>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<(f64, f64)>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("hermite rule cache poisoned");
    guard
        .entry(nodes)
        .or_insert_with(|| {
            let n = std::num::NonZeroUsize::new(nodes).expect("node count validated nonzero");
            Arc::new(gauss_quad::GaussHermite::new(n).as_node_weight_pairs().to_vec())
        })
        .clone()
}

struct PassSums {
    log_scale: f64,
    s0: f64,
    s1: f64,
    s2: f64,
    extra: f64,
}

/// One Gauss–Hermite pass with envelope N(center, scale²):
/// Iₖ = (1/√π) Σᵢ wᵢ (xᵢ-center)^k · exp(g(xᵢ)), g = -φ + ln q_c - ln envelope,
/// with the max of g factored out. `extra` accumulates Σ w f(x) exp(g - m)
/// for expectations of arbitrary statistics under the hybrid.
fn gh_pass(
    site: &SiteModel1D,
    cavity: &GaussianDensity1D,
    center: f64,
    scale: f64,
    rule: &[(f64, f64)],
    extra: Option<&dyn Fn(f64) -> f64>,
) -> Result<PassSums, TiltedError> {
    let ln_env_norm = -scale.ln() - HALF_LN_2PI;
    let mut gs = Vec::with_capacity(rule.len());
    let mut dxs = Vec::with_capacity(rule.len());
    let mut g_max = f64::NEG_INFINITY;
    for &(t, _) in rule {
        let dx = scale * std::f64::consts::SQRT_2 * t;
        let x = center + dx;
        let ln_env = -0.5 * (dx / scale) * (dx / scale) + ln_env_norm;
        let g = -site.phi(x) + cavity.ln_pdf(x) - ln_env;
        if g.is_nan() || g == f64::INFINITY {
            return Err(TiltedError::NonFiniteIntegrand { site: site.name().to_string(), node: x });
        }
        g_max = g_max.max(g);
        gs.push(g);
        dxs.push(dx);
    }
    if g_max == f64::NEG_INFINITY {
        return Err(TiltedError::DegenerateMoments { site: site.name().to_string(), variance: f64::NAN });
    }
    let (mut s0, mut s1, mut s2, mut sx) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for ((&(_, w), &g), &dx) in rule.iter().zip(&gs).zip(&dxs) {
        let f = w * (g - g_max).exp();
        s0 += f;
        s1 += f * dx;
        s2 += f * dx * dx;
        if let Some(stat) = extra {
            sx += f * stat(center + dx);
        }
    }
    let sqrt_pi = std::f64::consts::PI.sqrt();
    Ok(PassSums { log_scale: g_max, s0: s0 / sqrt_pi, s1: s1 / sqrt_pi, s2: s2 / sqrt_pi, extra: sx / sqrt_pi })
}

/// The recenter/rescale refinement loop at one fixed rule size.
fn refined_moments(
    site: &SiteModel1D,
    cavity: &GaussianDensity1D,
    cfg: &QuadratureConfig,
    rule: &[(f64, f64)],
) -> Result<TiltedMoments1D, TiltedError> {
    let cavity_sd = cavity.sd();
    let mut center = cavity.mean();
    let mut scale = cavity_sd;
    let mut result = None;
    let max_passes = match cfg.center_on {
        CenterOn::CavityMean => 0,
        CenterOn::Refined => cfg.expansion_passes,
    };
    for _pass in 0..=max_passes {
        let sums = gh_pass(site, cavity, center, scale, rule, None)?;
        let mean = center + sums.s1 / sums.s0;
        let variance = sums.s2 / sums.s0 - (sums.s1 / sums.s0) * (sums.s1 / sums.s0);
        if !(variance > 0.0) || !mean.is_finite() {
            return Err(TiltedError::DegenerateMoments { site: site.name().to_string(), variance });
        }
        let log_z = sums.log_scale + sums.s0.ln();
        result = Some(TiltedMoments1D { log_z, mean, variance });
        let moved = (mean - center).abs();
        center = mean;
        scale = variance.sqrt();
        if moved < 1e-3 * cavity_sd {
            break;
        }
    }
    Ok(result.expect("at least one quadrature pass runs"))
}

fn moments_agree(a: &TiltedMoments1D, b: &TiltedMoments1D) -> bool {
    let sd = b.variance.sqrt();
    (a.mean - b.mean).abs() <= ESCALATION_RTOL * sd
        && (a.variance - b.variance).abs() <= ESCALATION_RTOL * b.variance
        && (a.log_z - b.log_z).abs() <= ESCALATION_RTOL * (1.0 + b.log_z.abs())
}

/// Tilted moments of site × cavity by adaptive Gauss–Hermite quadrature:
/// recenter/rescale refinement at each rule size, escalating the rule until
/// two successive sizes agree.
pub fn tilted_moments_quadrature(
    site: &SiteModel1D,
    cavity: &GaussianDensity1D,
    cfg: &QuadratureConfig,
) -> Result<TiltedMoments1D, TiltedError> {
    cfg.validate()?;
    let mut nodes = cfg.nodes;
    let mut prev = refined_moments(site, cavity, cfg, &hermite_rule(nodes))?;
    for _ in 0..MAX_ESCALATIONS {
        nodes = 2 * nodes - 1;
        let next = refined_moments(site, cavity, cfg, &hermite_rule(nodes))?;
        if moments_agree(&prev, &next) {
            return Ok(next);
        }
        prev = next;
    }
    Ok(prev)
}

/// Expectation E_h[f(x)] under the hybrid, using the same quadrature scheme
/// with the envelope centered on already-computed tilted moments, escalated
/// until successive rule sizes agree.
pub fn tilted_expectation(
    site: &SiteModel1D,
    cavity: &GaussianDensity1D,
    moments: &TiltedMoments1D,
    cfg: &QuadratureConfig,
    f: impl Fn(f64) -> f64,
) -> Result<f64, TiltedError> {
    let eval = |nodes: usize| -> Result<f64, TiltedError> {
        let rule = hermite_rule(nodes);
        let sums = gh_pass(site, cavity, moments.mean, moments.variance.sqrt(), &rule, Some(&f))?;
        Ok(sums.extra / sums.s0)
    };
    let mut nodes = cfg.nodes;
    let mut prev = eval(nodes)?;
    for _ in 0..MAX_ESCALATIONS {
        nodes = 2 * nodes - 1;
        let next = eval(nodes)?;
        if (next - prev).abs() <= ESCALATION_RTOL * (1.0 + next.abs()) {
            return Ok(next);
        }
        prev = next;
    }
    Ok(prev)
}

/// Closed-form tilted moments for a Gaussian site exp(-(γ/2)x² + αx): the
/// posterior is Gaussian with natural parameters (β+γ, r+α).
pub fn tilted_moments_gaussian(
    gamma: f64,
    alpha: f64,
    cavity: &GaussianDensity1D,
) -> Result<TiltedMoments1D, TiltedError> {
    let c = cavity.params();
    let post = NaturalParams1D::new(c.precision + gamma, c.shift + alpha);
    if post.precision <= 0.0 {
        return Err(TiltedError::NotNormalizable {
            site: format!("gaussian(gamma={gamma},alpha={alpha})"),
            precision: post.precision,
        });
    }
    let log_z = post.log_normalizer() - c.log_normalizer();
    Ok(TiltedMoments1D { log_z, mean: post.shift / post.precision, variance: 1.0 / post.precision })
}

/// Closed-form ND tilted moments for a probit site Φ(y·vᵀx) against a
/// Gaussian cavity: a rank-one update of the cavity along Σv.
///
/// With μₐ = vᵀm, s² = vᵀΣv and z = y·μₐ/√(1+s²):
///   log Z = log Φ(z),
///   E[a]  = μₐ + y s² λ(z)/√(1+s²),
///   V[a]  = s² - s⁴ λ(z)(λ(z)+z)/(1+s²),
/// and the joint moments follow from Gaussian conditioning on a = vᵀx.
pub fn tilted_moments_probit(
    y: f64,
    v: &DVector<f64>,
    cavity: &GaussianDensityND,
) -> Result<TiltedMomentsND, TiltedError> {
    assert!(y == 1.0 || y == -1.0, "probit site requires y in {{-1,+1}}");
    let m = cavity.mean();
    let cov = cavity.covariance();
    let cv = &cov * v;
    let s2 = v.dot(&cv);
    if s2 <= 0.0 {
        // v = 0: the site is the constant Φ(0) = ½
        return Ok(TiltedMomentsND { log_z: 0.5f64.ln(), mean: m, covariance: cov });
    }
    let mu_a = v.dot(&m);
    let denom = (1.0 + s2).sqrt();
    let z = y * mu_a / denom;
    let lam = inverse_mills(z);
    let log_z = ln_normal_cdf(z);
    let mean_shift = y * s2 * lam / denom;
    let var_a = s2 - s2 * s2 * lam * (lam + z) / (1.0 + s2);
    let mean = &m + &cv * (mean_shift / s2);
    let covariance = &cov + &cv * cv.transpose() * ((var_a - s2) / (s2 * s2));
    Ok(TiltedMomentsND { log_z, mean, covariance })
}

/// ND tilted moments for any 1D site observed through a linear predictor
/// a = vᵀx (the quadrature reference path behind the probit closed form):
/// the 1D tilted marginal of a is computed by quadrature against the cavity
/// marginal N(vᵀm, vᵀΣv), then lifted by Gaussian conditioning.
pub fn tilted_moments_linear(
    site: &SiteModel1D,
    v: &DVector<f64>,
    cavity: &GaussianDensityND,
    cfg: &QuadratureConfig,
) -> Result<TiltedMomentsND, TiltedError> {
    let m = cavity.mean();
    let cov = cavity.covariance();
    let cv = &cov * v;
    let s2 = v.dot(&cv);
    if s2 <= 0.0 {
        return Ok(TiltedMomentsND { log_z: -site.phi(0.0), mean: m, covariance: cov });
    }
    let mu_a = v.dot(&m);
    let marginal = from_moments(mu_a, s2)?;
    let tm = tilted_moments_quadrature(site, &marginal, cfg)?;
    let mean = &m + &cv * ((tm.mean - mu_a) / s2);
    let covariance = &cov + &cv * cv.transpose() * ((tm.variance - s2) / (s2 * s2));
    Ok(TiltedMomentsND { log_z: tm.log_z, mean, covariance })
}

/// Closed-form tilted moments of the 2D two-component mixture site against a
/// Gaussian cavity. The hybrid is itself a two-component Gaussian mixture:
/// component j updates coordinate j by a unit-precision observation of y, and
/// the output covariance includes the between-component spread term.
pub fn tilted_moments_mixture(
    y: f64,
    cavity: &GaussianDensityND,
) -> Result<TiltedMoments2D, TiltedError> {
    assert_eq!(cavity.dim(), 2, "mixture site is 2-dimensional");
    let m = cavity.mean();
    let cov = cavity.covariance();
    let mut ln_z_j = [0.0f64; 2];
    let mut comp = Vec::with_capacity(2);
    for j in 0..2 {
        // marginal evidence: y ~ N(m_j, 1 + Σ_jj)
        let v = 1.0 + cov[(j, j)];
        let d = y - m[j];
        ln_z_j[j] = -0.5 * d * d / v - 0.5 * v.ln() - HALF_LN_2PI;
        let mut q = cavity.params().precision_matrix().clone();
        q[(j, j)] += 1.0;
        let mut r = cavity.params().shift_vector().clone();
        r[j] += y;
        let dens = GaussianDensityND::new(NaturalParamsND::new(q, r)?)?;
        comp.push((dens.mean(), dens.covariance()));
    }
    let half = 0.5f64.ln();
    let log_z = log_sum_exp(half + ln_z_j[0], half + ln_z_j[1]);
    let w = [(half + ln_z_j[0] - log_z).exp(), (half + ln_z_j[1] - log_z).exp()];
    let mean = &comp[0].0 * w[0] + &comp[1].0 * w[1];
    let mut covariance = DMatrix::zeros(2, 2);
    for j in 0..2 {
        let dm = &comp[j].0 - &mean;
        covariance += (&comp[j].1 + &dm * dm.transpose()) * w[j];
    }
    Ok(TiltedMoments2D { log_z, mean, covariance })
}

/// Site-approximation update: λᵢ ← ∇φ⁻¹(η) − λ_cavity. The result is
/// unconstrained in sign. `m` must satisfy the tilted-moments invariant
/// (variance > 0).
pub fn site_update_from_moments(m: &TiltedMoments1D, cavity: &NaturalParams1D) -> NaturalParams1D {
    let matched = from_moments(m.mean, m.variance).expect("tilted moments invariant").params();
    matched.sub(cavity)
}

/// ND analogue of [`site_update_from_moments`].
pub fn site_update_from_moments_nd(
    m: &TiltedMomentsND,
    cavity: &NaturalParamsND,
) -> Result<NaturalParamsND, TiltedError> {
    let matched = from_moments_nd(&m.mean, &m.covariance)?;
    Ok(matched.params().sub(cavity))
}

/// Residual of the Stein identity rᵢ = βᵢ·μ_h − E_h[φ′], with E_h[φ′]
/// computed by the same quadrature. A correctness cross-check: the returned
/// value should be ≤ 1e-6·(1+|rᵢ|) for consistent inputs.
pub fn stein_residual(
    site: &SiteModel1D,
    cavity: &GaussianDensity1D,
    update: &NaturalParams1D,
    m: &TiltedMoments1D,
    cfg: &QuadratureConfig,
) -> Result<f64, TiltedError> {
    let e_d1 = tilted_expectation(site, cavity, m, cfg, |x| site.d1(x))?;
    Ok((update.shift - (update.precision * m.mean - e_d1)).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlVerdict {
    Holds,
    Violated,
    /// The site is not log-concave on the quadrature support, so the bound
    /// does not apply.
    NotApplicable,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BrascampLiebCheck {
    pub variance: f64,
    pub bound: f64,
    pub verdict: BlVerdict,
}

/// Brascamp-Lieb variance bound for the hybrid: var_h(x) ≤ E_h[(φ″(x)+β)⁻¹].
///
/// Log-concavity of the site is probed on the quadrature support; if φ″ dips
/// below -1e-12 the verdict is NotApplicable. If φ″+β ≤ 0 anywhere on the
/// support the bound itself is undefined and a typed error is returned.
pub fn brascamp_lieb_check(
    site: &SiteModel1D,
    cavity: &GaussianDensity1D,
    cfg: &QuadratureConfig,
) -> Result<BrascampLiebCheck, TiltedError> {
    let m = tilted_moments_quadrature(site, cavity, cfg)?;
    let beta = cavity.params().precision;
    let rule = hermite_rule(cfg.nodes);
    let scale = m.variance.sqrt();
    let mut log_concave = true;
    for &(t, _) in rule.iter() {
        let x = m.mean + scale * std::f64::consts::SQRT_2 * t;
        let curv = site.d2(x);
        if curv + beta <= 0.0 {
            return Err(TiltedError::BoundUndefined { node: x });
        }
        if curv < -1e-12 {
            log_concave = false;
        }
    }
    let bound = tilted_expectation(site, cavity, &m, cfg, |x| 1.0 / (site.d2(x) + beta))?;
    let verdict = if !log_concave {
        BlVerdict::NotApplicable
    } else if m.variance <= bound + 1e-10 {
        BlVerdict::Holds
    } else {
        BlVerdict::Violated
    };
    Ok(BrascampLiebCheck { variance: m.variance, bound, verdict })
}
