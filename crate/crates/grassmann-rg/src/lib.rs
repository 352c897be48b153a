//! Desk-scale engine for the Grassmann-integral formulation of half-filled
//! multi-band lattice fermions.
//!
//! The crate builds the discrete-time Grassmann representation of the free
//! energy, runs the Matsubara ultraviolet and infrared multi-scale flows on
//! small lattices, and checks the resulting quantities against exact
//! Fock-space and brute-force references.
//!
//! Module map:
//! - [`lattice_index`]: index sets, wrapping maps, distances.
//! - [`model`]: hopping matrices, the four-band dispersion, interaction
//!   polynomials and Fock-space operators.
//! - [`cutoff`]: the Gevrey bump, ultraviolet and infrared cutoffs, scale counts.
//! - [`covariance`]: every covariance of the formulation plus norms and probes.
//! - [`grassmann`]: sparse Grassmann polynomials, Gaussian integration, norms
//!   and symmetry transforms.
//! - [`rgflow`]: the ultraviolet and infrared flows and bound reports.
//! - [`oracle`]: exact references (traces, partition functions, flux search).
//! - [`suites`]: acceptance criteria evaluators.
//! - [`cli`]: configuration and experiment orchestration.

pub mod cli;
pub mod covariance;
pub mod cutoff;
pub mod grassmann;
pub mod lattice_index;
pub mod model;
pub mod oracle;
pub mod rgflow;
pub mod suites;

pub use num_complex::Complex64 as C64;

/// Errors raised anywhere in the engine.
///
/// The variants map onto the CLI exit-code taxonomy: configuration problems,
/// capacity overruns, flow aborts (the small-coupling regime was left) and
/// numeric or contract failures.
#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("flow aborted: {0}")]
    FlowAbort(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;
