//! Error types shared across the crate.
//!
//! Errors are split by what the caller can do about them: configuration and
//! parameter problems are caught before any solve starts, domain violations
//! and kinetic overflows surface bad states mid-run, and the solver variants
//! carry enough context (iteration history, defect magnitude) to debug a
//! failed run from the error alone.

use crate::charge::BcMode;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Configuration file could not be read or parsed.
    #[error("config error: {0}")]
    Config(String),

    /// Parameter values fail validation (nonpositive lengths, bad fractions, ...).
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    /// A physical quantity left its admissible range by more than the
    /// tolerated slack (negative concentration, saturation overshoot, ...).
    #[error("domain violation: {0}")]
    Domain(String),

    /// Mesh construction failed (too few cells, degenerate widths).
    #[error("mesh error: {0}")]
    Mesh(String),

    /// A Butler-Volmer exponent grew past the overflow guard. The state that
    /// produced it is almost always a diverging Newton iterate or a grossly
    /// wrong initial guess.
    #[error("kinetic overflow{context}: exponent {exponent:.3e} exceeds limit")]
    KineticOverflow { context: String, exponent: f64 },

    /// The charge conservation problem has no solution under the requested
    /// boundary encoding. The defect is |k-d-/q- minus k+d+/q+|, which must
    /// vanish for a solvable system.
    #[error("ill-posed charge problem ({mode}): compatibility defect {defect:.6e} is nonzero, no solution exists unless I = 0")]
    IllPosed { mode: BcMode, defect: f64 },

    /// Newton failed to reach the residual tolerance.
    #[error("Newton did not converge after {iterations} iterations (residual history: {history:?})")]
    NonConvergence {
        iterations: usize,
        history: Vec<f64>,
    },

    /// A linear solve hit a zero pivot.
    #[error("singular linear system: {0}")]
    Singular(String),

    /// A time step failed for a reason other than the ones above.
    #[error("step failed: {0}")]
    Step(String),

    /// A conservation or consistency check that the discretization guarantees
    /// by construction was violated at runtime. This indicates a bug, not a
    /// modelling problem, so the run aborts rather than continuing on
    /// corrupted state.
    #[error("invariant '{name}' violated: {detail}")]
    Invariant { name: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the command line interface: 2 for problems with the
    /// inputs, 3 for solver failures on valid inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidParameters(_)
            | Error::Domain(_)
            | Error::Mesh(_)
            | Error::Io(_) => 2,
            Error::KineticOverflow { .. }
            | Error::IllPosed { .. }
            | Error::NonConvergence { .. }
            | Error::Singular(_)
            | Error::Step(_)
            | Error::Invariant { .. } => 3,
        }
    }
}
