use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid game spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular linear system (pivot {pivot:e} below threshold)")]
    Singular { pivot: f64 },

    #[error("divergent series: spectral radius {spectral_radius} >= 1")]
    Divergent { spectral_radius: f64 },

    #[error("chain is reducible: {0}")]
    Reducible(String),

    #[error("no sign change on bisection bracket [{lo}, {hi}]")]
    NoBracket { lo: f64, hi: f64 },

    #[error("{what} did not converge after {iterations} iterations (last residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("non-positive entry {value} at index {index}")]
    NonPositive { index: usize, value: f64 },

    #[error("not a stochastic kernel: row {row} sums to {sum}")]
    NotStochastic { row: usize, sum: f64 },

    #[error("lyapunov drift violated at state {state}, actions ({u}, {v}): lhs {lhs} > rhs {rhs}")]
    DriftViolated {
        state: usize,
        u: usize,
        v: usize,
        lhs: f64,
        rhs: f64,
    },

    #[error("no feasible geometric rate R > 1")]
    NoFeasibleRate,

    #[error("no equilibrium survived tolerance ({skipped} degenerate supports skipped)")]
    NoEquilibrium { skipped: usize },

    #[error("assumption failure: {0}")]
    Assumption(String),
}
