//! The EP iterations: classic sequential EP, parallel EP, and averaged-EP
//! (both the simplified update rule and the slowed averaging rule), with
//! damping, cavity guards, convergence detection, and limit-cycle detection.
//!
//! The engine is generic over the natural-parameter type, so the same pass
//! code drives 1D and ND problems. States are immutable values; pass
//! functions return new states. The parallel passes may evaluate the n
//! tilted-moment computations concurrently, but the reduction to the new
//! global is a fixed-order summation over site index, so results do not
//! depend on completion order. Sequential EP updates the global parameter
//! immediately after every site (that is exactly what distinguishes it from
//! the parallel variant), and every pass re-sums the global from the site
//! parameters to prevent drift.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expfam::{GaussianDensity1D, GaussianDensityND, NaturalParams, NaturalParams1D, NaturalParamsND};
use crate::sites::SiteModel1D;
use crate::tilted::{
    tilted_moments_gaussian, tilted_moments_linear, tilted_moments_mixture, tilted_moments_probit,
    tilted_moments_quadrature, QuadratureConfig, TiltedError,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("tilted-moment computation failed for site {site}: {source}")]
    Moments {
        site: usize,
        #[source]
        source: TiltedError,
    },
    #[error("aEP shared cavity is not a valid density")]
    InvalidSharedCavity,
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
}

/// Computes ∇φ⁻¹(ηᵢ): the natural parameters of the Gaussian matching the
/// moments of site i's hybrid against the given cavity. Implementations
/// dispatch to quadrature or a closed form per site and must be
/// deterministic for identical inputs.
pub trait SiteMoments<P: NaturalParams>: Sync {
    fn n_sites(&self) -> usize;
    fn matched_natural(&self, site: usize, cavity: &P) -> Result<P, TiltedError>;
}

/// Per-site EP state: site parameters λᵢ plus their sum λ_s. The global is
/// re-summed after every pass, keeping |λ_s − Σλᵢ| at rounding level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EPState<P: NaturalParams> {
    site_params: Vec<P>,
    global: P,
}

fn sum_params<P: NaturalParams>(params: &[P]) -> P {
    let mut acc = params[0].zero_like();
    for p in params {
        acc = acc.add(p);
    }
    acc
}

impl<P: NaturalParams> EPState<P> {
    /// Build a state from given site parameters; the global must be
    /// interpretable as a density.
    pub fn given(site_params: Vec<P>) -> Result<Self, EngineError> {
        if site_params.is_empty() {
            return Err(EngineError::InvalidState("need at least one site".into()));
        }
        let global = sum_params(&site_params);
        if !global.density_ok(0.0) {
            return Err(EngineError::InvalidState("global parameter is not a density".into()));
        }
        Ok(Self { site_params, global })
    }

    /// All likelihood-site λᵢ = 0, the prior site carries its exact Gaussian
    /// parameters, so the initial global equals the prior. The prior is
    /// site 0.
    pub fn flat_sites_with_prior(prior: P, n_likelihood: usize) -> Result<Self, EngineError> {
        let mut site_params = vec![prior.zero_like(); n_likelihood + 1];
        site_params[0] = prior;
        Self::given(site_params)
    }

    /// λᵢ = global/n for all i.
    pub fn uniform_split(global: P, n: usize) -> Result<Self, EngineError> {
        if n == 0 {
            return Err(EngineError::InvalidState("need at least one site".into()));
        }
        Self::given(vec![global.scale(1.0 / n as f64); n])
    }

    pub fn n_sites(&self) -> usize {
        self.site_params.len()
    }

    pub fn site_params(&self) -> &[P] {
        &self.site_params
    }

    pub fn global(&self) -> &P {
        &self.global
    }
}

/// Global-only aEP state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AEPState<P: NaturalParams> {
    global: P,
    n: usize,
}

impl<P: NaturalParams> AEPState<P> {
    pub fn new(global: P, n: usize) -> Result<Self, EngineError> {
        if n == 0 {
            return Err(EngineError::InvalidState("need at least one site".into()));
        }
        if !global.density_ok(0.0) {
            return Err(EngineError::InvalidState("global parameter is not a density".into()));
        }
        Ok(Self { global, n })
    }

    pub fn global(&self) -> &P {
        &self.global
    }

    pub fn n_sites(&self) -> usize {
        self.n
    }
}

/// Damping, termination, and guard thresholds for the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunConfig {
    /// Speed γ ∈ (0,1]; damping interpolates in natural-parameter space,
    /// λ ← (1-γ)λ_old + γλ_new.
    pub damping: f64,
    pub max_passes: usize,
    /// Relative tolerance on the change of the global natural parameters.
    pub tol: f64,
    /// ε_cav: 1D cavities with precision at or below this are skipped.
    pub cavity_floor: f64,
    /// How far back the cycle detector compares states.
    pub cycle_window: usize,
    pub cycle_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { damping: 1.0, max_passes: 200, tol: 1e-9, cavity_floor: 1e-8, cycle_window: 40, cycle_tol: 1e-7 }
    }
}

impl RunConfig {
    pub fn with_damping(damping: f64) -> Self {
        Self { damping, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(EngineError::InvalidConfig(format!("damping must be in (0,1], got {}", self.damping)));
        }
        Ok(())
    }
}

/// A pass result: the new state plus the indices of sites skipped because
/// their cavity was not a valid density.
#[derive(Debug, Clone)]
pub struct PassOutcome<S> {
    pub state: S,
    pub skipped: Vec<usize>,
}

fn damp<P: NaturalParams>(old: &P, raw_new: &P, gamma: f64) -> P {
    if gamma == 1.0 {
        raw_new.clone()
    } else {
        old.scale(1.0 - gamma).add(&raw_new.scale(gamma))
    }
}

/// Classic sequential EP (one full loop over the sites): for each site in
/// order, form the cavity λ₋ᵢ = λ_s − λᵢ, skip if it is not a valid density,
/// otherwise moment-match the hybrid, damp the site update, and fold the new
/// site parameter into λ_s immediately.
pub fn sequential_pass<P, M>(
    state: &EPState<P>,
    moments: &M,
    cfg: &RunConfig,
) -> Result<PassOutcome<EPState<P>>, EngineError>
where
    P: NaturalParams,
    M: SiteMoments<P> + ?Sized,
{
    cfg.validate()?;
    let mut site_params = state.site_params.clone();
    let mut global = state.global.clone();
    let mut skipped = Vec::new();
    for i in 0..site_params.len() {
        let cavity = global.sub(&site_params[i]);
        if !cavity.density_ok(cfg.cavity_floor) {
            skipped.push(i);
            continue;
        }
        let matched = moments
            .matched_natural(i, &cavity)
            .map_err(|source| EngineError::Moments { site: i, source })?;
        let raw = matched.sub(&cavity);
        site_params[i] = damp(&site_params[i], &raw, cfg.damping);
        global = cavity.add(&site_params[i]);
    }
    let global = sum_params(&site_params);
    Ok(PassOutcome { state: EPState { site_params, global }, skipped })
}

/// Parallel EP: all cavities are formed from the same incoming λ_s, local
/// updates are computed independently (concurrently), damping is applied per
/// site, and λ_s is rebuilt once at the end.
pub fn parallel_pass<P, M>(
    state: &EPState<P>,
    moments: &M,
    cfg: &RunConfig,
) -> Result<PassOutcome<EPState<P>>, EngineError>
where
    P: NaturalParams,
    M: SiteMoments<P> + ?Sized,
{
    cfg.validate()?;
    let global = &state.global;
    let updates: Vec<Result<Option<P>, EngineError>> = state
        .site_params
        .par_iter()
        .enumerate()
        .map(|(i, lambda_i)| {
            let cavity = global.sub(lambda_i);
            if !cavity.density_ok(cfg.cavity_floor) {
                return Ok(None);
            }
            let matched = moments
                .matched_natural(i, &cavity)
                .map_err(|source| EngineError::Moments { site: i, source })?;
            Ok(Some(damp(lambda_i, &matched.sub(&cavity), cfg.damping)))
        })
        .collect();
    let mut site_params = Vec::with_capacity(state.site_params.len());
    let mut skipped = Vec::new();
    for (i, upd) in updates.into_iter().enumerate() {
        match upd? {
            Some(p) => site_params.push(p),
            None => {
                skipped.push(i);
                site_params.push(state.site_params[i].clone());
            }
        }
    }
    let global = sum_params(&site_params);
    Ok(PassOutcome { state: EPState { site_params, global }, skipped })
}

fn aep_matched_sum<P, M>(state: &AEPState<P>, moments: &M, cfg: &RunConfig) -> Result<Vec<P>, EngineError>
where
    P: NaturalParams,
    M: SiteMoments<P> + ?Sized,
{
    cfg.validate()?;
    let n = state.n;
    let cavity = state.global.scale((n as f64 - 1.0) / n as f64);
    if !cavity.density_ok(cfg.cavity_floor) {
        return Err(EngineError::InvalidSharedCavity);
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            moments
                .matched_natural(i, &cavity)
                .map_err(|source| EngineError::Moments { site: i, source })
        })
        .collect()
}

/// Averaged-EP, simplified update rule: one shared cavity λ_c = ((n-1)/n)λ_s,
/// n tilted-moment computations, then λ_s′ = Σ∇φ⁻¹(ηᵢ) − (n−1)λ_s, damped.
/// The single shared cavity leaves nothing to skip, so an invalid cavity is a
/// pass-level error.
pub fn aep_pass<P, M>(state: &AEPState<P>, moments: &M, cfg: &RunConfig) -> Result<PassOutcome<AEPState<P>>, EngineError>
where
    P: NaturalParams,
    M: SiteMoments<P> + ?Sized,
{
    let matched = aep_matched_sum(state, moments, cfg)?;
    let raw = sum_params(&matched).sub(&state.global.scale(state.n as f64 - 1.0));
    let global = damp(&state.global, &raw, cfg.damping);
    Ok(PassOutcome { state: AEPState { global, n: state.n }, skipped: Vec::new() })
}

/// The averaging rule λ_s′ = (1/n)Σ∇φ⁻¹(ηᵢ): same cavities and moments as
/// [`aep_pass`] but a slowed update; shares its fixed points.
pub fn aep_averaged_pass<P, M>(
    state: &AEPState<P>,
    moments: &M,
    cfg: &RunConfig,
) -> Result<PassOutcome<AEPState<P>>, EngineError>
where
    P: NaturalParams,
    M: SiteMoments<P> + ?Sized,
{
    let matched = aep_matched_sum(state, moments, cfg)?;
    let raw = sum_params(&matched).scale(1.0 / state.n as f64);
    let global = damp(&state.global, &raw, cfg.damping);
    Ok(PassOutcome { state: AEPState { global, n: state.n }, skipped: Vec::new() })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    Cycle { period: usize },
    Diverged,
    MaxPasses,
}

impl RunStatus {
    pub fn label(&self) -> String {
        match self {
            RunStatus::Converged => "converged".into(),
            RunStatus::Cycle { period } => format!("cycle({period})"),
            RunStatus::Diverged => "diverged".into(),
            RunStatus::MaxPasses => "max_passes".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SkipRecord {
    pub pass: usize,
    pub site: usize,
}

/// Trajectory of global parameters with termination status. The trajectory
/// includes the initial state, so its length is passes_used + 1.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport<P: NaturalParams + Serialize> {
    pub trajectory: Vec<P>,
    pub status: RunStatus,
    pub passes_used: usize,
    pub skips: Vec<SkipRecord>,
    /// Present when a pass aborted (its error message); the status is then
    /// `Diverged`.
    pub failure: Option<String>,
}

pub trait EpStateView<P: NaturalParams> {
    fn view_global(&self) -> &P;
}

impl<P: NaturalParams> EpStateView<P> for EPState<P> {
    fn view_global(&self) -> &P {
        &self.global
    }
}

impl<P: NaturalParams> EpStateView<P> for AEPState<P> {
    fn view_global(&self) -> &P {
        &self.global
    }
}

/// Iterate a pass function to termination. All failure modes become
/// statuses: converged when the global change drops below `tol`; cycle(p)
/// when the trajectory revisits a state at lag 2 ≤ p ≤ cycle_window within
/// `cycle_tol` while still moving; diverged when the global stops being a
/// finite density or a pass errors; max_passes otherwise. Returns the report
/// together with the final state.
pub fn run<P, S, F>(initial: S, mut pass: F, cfg: &RunConfig) -> (RunReport<P>, S)
where
    P: NaturalParams + Serialize,
    S: EpStateView<P>,
    F: FnMut(&S) -> Result<PassOutcome<S>, EngineError>,
{
    let mut trajectory = vec![initial.view_global().clone()];
    let mut skips = Vec::new();
    let mut state = initial;
    let mut status = RunStatus::MaxPasses;
    let mut failure = None;
    for pass_idx in 1..=cfg.max_passes {
        match pass(&state) {
            Err(e) => {
                status = RunStatus::Diverged;
                failure = Some(e.to_string());
                break;
            }
            Ok(outcome) => {
                state = outcome.state;
                skips.extend(outcome.skipped.into_iter().map(|site| SkipRecord { pass: pass_idx, site }));
                let g = state.view_global().clone();
                let step = g.max_rel_diff(trajectory.last().expect("trajectory nonempty"));
                trajectory.push(g.clone());
                if !g.all_finite() || !g.density_ok(0.0) {
                    status = RunStatus::Diverged;
                    break;
                }
                if step < cfg.tol {
                    status = RunStatus::Converged;
                    break;
                }
                // only look for cycles while the iteration is clearly still
                // moving, so slow geometric convergence is not misread as a
                // short cycle
                if step > 10.0 * cfg.cycle_tol {
                    let t = trajectory.len() - 1;
                    let max_lag = cfg.cycle_window.min(t);
                    if let Some(period) = (2..=max_lag)
                        .find(|p| g.max_rel_diff(&trajectory[t - p]) < cfg.cycle_tol)
                    {
                        status = RunStatus::Cycle { period };
                        break;
                    }
                }
            }
        }
    }
    let passes_used = trajectory.len() - 1;
    (RunReport { trajectory, status, passes_used, skips, failure }, state)
}

// ---------------------------------------------------------------------------
// SiteMoments implementations
// ---------------------------------------------------------------------------

/// How one 1D site's hybrid moments are computed.
#[derive(Debug, Clone)]
pub enum SiteRoute1D {
    /// Reference path: adaptive Gauss–Hermite quadrature.
    Quadrature(SiteModel1D),
    /// Conjugate closed form; works for any cavity parameters, including a
    /// flat cavity (the n = 1 aEP case), as long as the posterior is proper.
    GaussianExact { gamma: f64, alpha: f64 },
}

/// Site-moments dispatcher for 1D problems.
pub struct Moments1D {
    routes: Vec<SiteRoute1D>,
    cfg: QuadratureConfig,
}

impl Moments1D {
    pub fn new(routes: Vec<SiteRoute1D>, cfg: QuadratureConfig) -> Self {
        Self { routes, cfg }
    }

    /// All sites via quadrature.
    pub fn quadrature(sites: Vec<SiteModel1D>, cfg: QuadratureConfig) -> Self {
        Self::new(sites.into_iter().map(SiteRoute1D::Quadrature).collect(), cfg)
    }

    pub fn quadrature_config(&self) -> &QuadratureConfig {
        &self.cfg
    }
}

impl SiteMoments<NaturalParams1D> for Moments1D {
    fn n_sites(&self) -> usize {
        self.routes.len()
    }

    fn matched_natural(&self, site: usize, cavity: &NaturalParams1D) -> Result<NaturalParams1D, TiltedError> {
        match &self.routes[site] {
            SiteRoute1D::GaussianExact { gamma, alpha } => {
                let matched = NaturalParams1D::new(cavity.precision + gamma, cavity.shift + alpha);
                if matched.precision <= 0.0 {
                    return Err(TiltedError::NotNormalizable {
                        site: format!("gaussian(gamma={gamma},alpha={alpha})"),
                        precision: matched.precision,
                    });
                }
                Ok(matched)
            }
            SiteRoute1D::Quadrature(model) => {
                let dens = GaussianDensity1D::new(*cavity)?;
                let m = tilted_moments_quadrature(model, &dens, &self.cfg)?;
                Ok(crate::expfam::from_moments(m.mean, m.variance)?.params())
            }
        }
    }
}

/// How one ND site's hybrid moments are computed.
#[derive(Debug, Clone)]
pub enum SiteRouteND {
    /// Conjugate closed form for an exact Gaussian site (e.g. the prior).
    GaussianExact(NaturalParamsND),
    /// 1D site through a linear predictor, moments by quadrature along it.
    Linear { site: SiteModel1D, regressor: DVector<f64> },
    /// Probit site through a linear predictor, Φ-based closed form.
    ProbitClosed { y: f64, regressor: DVector<f64> },
    /// 2D two-component Gaussian mixture site, closed form.
    Mixture { y: f64 },
}

/// Site-moments dispatcher for ND problems.
pub struct MomentsND {
    routes: Vec<SiteRouteND>,
    cfg: QuadratureConfig,
}

impl MomentsND {
    pub fn new(routes: Vec<SiteRouteND>, cfg: QuadratureConfig) -> Self {
        Self { routes, cfg }
    }
}

impl SiteMoments<NaturalParamsND> for MomentsND {
    fn n_sites(&self) -> usize {
        self.routes.len()
    }

    fn matched_natural(&self, site: usize, cavity: &NaturalParamsND) -> Result<NaturalParamsND, TiltedError> {
        match &self.routes[site] {
            SiteRouteND::GaussianExact(p) => Ok(cavity.add(p)),
            SiteRouteND::Linear { site: model, regressor } => {
                let dens = GaussianDensityND::new(cavity.clone())?;
                let m = tilted_moments_linear(model, regressor, &dens, &self.cfg)?;
                Ok(crate::expfam::from_moments_nd(&m.mean, &m.covariance)?.params().clone())
            }
            SiteRouteND::ProbitClosed { y, regressor } => {
                let dens = GaussianDensityND::new(cavity.clone())?;
                let m = tilted_moments_probit(*y, regressor, &dens)?;
                Ok(crate::expfam::from_moments_nd(&m.mean, &m.covariance)?.params().clone())
            }
            SiteRouteND::Mixture { y } => {
                let dens = GaussianDensityND::new(cavity.clone())?;
                let m = tilted_moments_mixture(*y, &dens)?;
                Ok(crate::expfam::from_moments_nd(&m.mean, &m.covariance)?.params().clone())
            }
        }
    }
}
