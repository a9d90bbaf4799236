//! # sbmlab — a numerical laboratory for coupled super-Brownian motions with immigration
//!
//! This crate builds, step by step, two *distinct* nonnegative solutions of the
//! one-dimensional stochastic heat equation with immigration,
//!
//! ```text
//!     ∂X/∂t = ½ ΔX + ψ + √X Ẇ,        X ≥ 0,
//! ```
//!
//! driven by **one and the same** space-time white noise Ẇ. The construction
//! approximates the continuous immigration ψ by two interleaved sequences of
//! point deposits ("clusters") of mass ψ(1)·ε, landing at times
//! `s_i = (i−½)ε` for the X-system and `t_i = iε` for the Y-system at i.i.d.
//! locations with density ψ(x)/ψ(1). Both systems are simulated on a shared
//! lattice with a shared noise field, so that their difference is driven only
//! by the interleaving — which is exactly what the separation experiment
//! measures.
//!
//! Modules:
//!
//! * [`params`] — admissible exponent bundles, derived constants
//!   (κ₁, κ₂, κ₃, ℘), the margin function Δ(r) and its root r₀, and the
//!   regime threshold ε₀(r).
//! * [`mathkernel`] — deterministic analysis helpers: the iterated
//!   self-improvement bound, the singular double integral
//!   I(a,b,c,T) = ∫₀ᵀ s^b ∫₀ˢ r^a (s−r)^c dr ds, exponent allocation,
//!   space-time parabola contact times, and cluster index classification.
//! * [`diffusion1d`] — exact laws of the total-mass diffusion
//!   dZ = √Z dB (Feller's branching diffusion): transition sampling,
//!   survival probabilities, the squared-Bessel(4) description of the
//!   process conditioned to reach 1, and hitting-probability estimators.
//! * [`lattice`] — grids, fields, the explicit heat half-step, white-noise
//!   increments, weighted sup-norms, mollified point deposits, and a binary
//!   frame format for field snapshots.
//! * [`spde`] — the coupled cluster simulation itself: immigration
//!   schedules, the shared-noise allocation across clusters (a Householder
//!   rotation of independent standard normals), the moment-exact
//!   square-root noise substep, and per-run recorders (masses, supports,
//!   window masses, covariation ledgers, weighted sup-norms).
//! * [`experiments`] — stopping times, conditioning-by-rejection, the
//!   growth/separation/isolation events, the full separation experiment
//!   with its report type, and a validator suite of statistical
//!   self-checks.
//! * [`stats`] — small statistical toolbox (Wilson intervals,
//!   two-sample Kolmogorov–Smirnov, log-log regression, quantiles).
//! * [`rng`] — deterministic counter-addressable randomness: every normal
//!   draw has a (seed, stream, step, cell) address, which makes replicas
//!   reproducible and the two systems' shared noise bit-identical.
//! * [`tolerances`] — every numeric tolerance and acceptance threshold in
//!   one place.

pub mod diffusion1d;
pub mod experiments;
pub mod lattice;
pub mod mathkernel;
pub mod params;
pub mod rng;
pub mod spde;
pub mod stats;
pub mod tolerances;

/// Crate-wide error type.
///
/// Every fallible operation returns [`Result`]. Variants are grouped by the
/// kind of failure so that callers (in particular the CLI) can map them to
/// exit codes without string matching.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violates a documented precondition.
    #[error("rejected input: {0}")]
    RejectedInput(String),
    /// A parameter bundle fails its admissibility constraints.
    #[error("inadmissible parameters: {0}")]
    Parameter(String),
    /// A quantity that must be finite/positive is not (e.g. a divergent
    /// integral, an empty feasible interval).
    #[error("infeasible: {0}")]
    Infeasible(String),
    /// A root/threshold search has no admissible solution.
    #[error("no solution: {0}")]
    NoSolution(String),
    /// A root/threshold search ran past its time horizon.
    #[error("horizon exceeded: {0}")]
    Horizon(String),
    /// A configuration file or key set cannot be interpreted.
    #[error("configuration error: {0}")]
    Config(String),
    /// A simulation step detected an unrecoverable numeric state.
    #[error("step aborted at step {step} (t = {time}): {msg}")]
    Step { step: u64, time: f64, msg: String },
    /// Requested data was not recorded during the run.
    #[error("missing record: {0}")]
    MissingRecord(String),
    /// An I/O error while reading or writing artifacts.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand constructor used throughout the crate.
    pub fn rejected(msg: impl Into<String>) -> Self {
        Error::RejectedInput(msg.into())
    }
}
