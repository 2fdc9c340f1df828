use thiserror::Error;

/// Error type shared across the engine.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("the zero mode k = 0 has no small divisor")]
    ZeroMode,

    #[error("invalid analytic domain: s = {s}, r = {r} (both must be positive)")]
    InvalidDomain { s: f64, r: f64 },

    #[error("small divisor below the Diophantine floor at k = {k:?}: |<k,omega>| = {divisor:.3e} < {floor:.3e}")]
    DivisorBelowFloor { k: Vec<i64>, divisor: f64, floor: f64 },

    #[error("singular per-mode system at k = {k:?} (reciprocal condition estimate {rcond:.3e})")]
    SingularSystem { k: Vec<i64>, rcond: f64 },

    #[error("parameter translation failed: best residual {best_residual:.3e} after {evals} evaluations (tolerance {tol:.3e})")]
    TranslationFailed {
        best_residual: f64,
        evals: usize,
        tol: f64,
    },

    #[error("iterate left the parameter ball: |xi - xi0| = {dist:.6e} >= {limit:.6e}")]
    BallBoundary { dist: f64, limit: f64 },

    #[error("perturbation norm failed to contract: {after:.3e} >= {before:.3e}")]
    NonContraction { before: f64, after: f64 },

    #[error("infeasible b-sequence at m = {m}: {detail}")]
    InfeasibleSequence { m: usize, detail: String },

    #[error("integer blow-up in a_m at m = {m} (achieved M = {achieved}): {detail}")]
    SequenceOverflow {
        m: usize,
        achieved: usize,
        detail: String,
    },

    #[error("Diophantine certification failed at k = {witness_k:?}: scaled divisor {scaled:.3e} < gamma = {gamma:.3e}")]
    DiophantineViolation {
        witness_k: Vec<i64>,
        scaled: f64,
        gamma: f64,
    },

    #[error("weak-convexity certificate failed: worst observed ratio {worst_ratio:.3e} < 1")]
    ConvexityFailed { worst_ratio: f64 },

    #[error("invalid modulus of continuity: {0}")]
    InvalidModulus(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("flow integration failed: {0}")]
    Integrator(String),
}

pub type Result<T> = std::result::Result<T, Error>;
