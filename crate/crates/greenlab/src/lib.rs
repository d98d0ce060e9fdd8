//! greenlab: a numerical laboratory for Green functions of second-order elliptic
//! operators with lower-order terms,
//!
//! ```text
//!     L u = −D_α(A^{αβ} D_β u + b^α u) + d^β D_β u + V u
//! ```
//!
//! on uniform 3-D grids. The crate builds averaged fundamental solutions and
//! Dirichlet Green fields variationally, measures their decay, integrability,
//! weak-type and continuity profiles against closed-form oracles, runs the
//! de Giorgi/Moser/Harnack machinery level-by-level, and computes the
//! Fefferman–Phong scale function m(x,V) together with its Agmon path metric.
//!
//! Start with the runnable programs under `examples/`:
//!
//! ```text
//! cargo run --example newtonian_kernel      # Green column vs 1/(4π|x−y|)
//! cargo run --example decay_and_weak_type   # shell slopes, L^q and level-set profiles
//! cargo run --example symmetry_representation
//! cargo run --example assemble_and_solve    # forms, coercivity, manufactured solution
//! cargo run --example operator_presets      # coefficient cases and ellipticity
//! cargo run --example grid_norms            # norms and the L²-vs-L⁶ growth demo
//! cargo run --example auxiliary_scale       # ψ, m(x,V), reverse Hölder constants
//! cargo run --example agmon_decay           # path metric and kernel decay fit
//! cargo run --example caccioppoli_degiorgi  # energy ratios and level-set iteration
//! cargo run --example harnack_holder        # Harnack ratios, oscillation exponents
//! cargo run --example scenario_report       # batch runner + deterministic report
//! ```
//!
//! The same capabilities are scriptable through the thin `greenlab` binary
//! (`run`, `m-of-x`, `agmon`, `schema` subcommands).

pub mod coefficients;
pub mod forms;
pub mod green;
pub mod grid;
pub mod potential;
pub mod regularity;
pub mod report;
pub mod scenario;
pub mod solver;
pub mod sparse;

use thiserror::Error;

/// Crate-wide error type. Construction errors carry enough context to point
/// at the offending input; solver errors carry the final residual.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid coefficients: {0}")]
    Coefficients(String),
    #[error("invalid region or functional: {0}")]
    Region(String),
    #[error("form assembly: {0}")]
    Forms(String),
    #[error("potential/scale function: {0}")]
    Potential(String),
    #[error("solver: {0}")]
    Solver(String),
    #[error("estimate: {0}")]
    Estimate(String),
    #[error("scenario config at `{pointer}`: {message}")]
    Scenario { pointer: String, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
