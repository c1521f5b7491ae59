//! Gaussian expectation propagation in natural-parameter form.
//!
//! The crate implements classic sequential EP, parallel EP, and averaged-EP
//! (aEP) over Gaussian approximating families, together with the machinery
//! needed to study them empirically: exponential-family arithmetic, site
//! models with audited derivatives, tilted-moment computation by adaptive
//! Gauss–Hermite quadrature (with closed forms cross-validated against it),
//! Newton's method as an approximate-inference iteration, and rate scans that
//! measure the asymptotic behavior of site updates, whole passes, stable
//! regions, and large-data convergence.
//!
//! All types are immutable values and all operations are pure functions; the
//! parallel passes evaluate per-site moments concurrently and reduce in site
//! order, so results are deterministic.

pub mod asymptotics;
pub mod engine;
pub mod expfam;
pub mod newton;
pub mod sites;
pub mod stable;
pub mod tilted;

pub use expfam::{
    cavity_subtract, from_moments, from_moments_nd, kl_gaussian, kl_gaussian_nd, to_moments,
    tv_upper_bound, ExpFamError, GaussianDensity1D, GaussianDensityND, NaturalParams,
    NaturalParams1D, NaturalParamsND,
};
