use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("penalty coefficient {name} must be positive, got {value}")]
    NonPositiveCoefficient { name: &'static str, value: f64 },
    #[error("sigma2 and sigma3 must differ (both {0})")]
    EqualSigmas(f64),
    #[error("outer step exponent must lie in (0, 1), got {0}")]
    BadExponent(f64),
    #[error("invalid schedule parameter: {0}")]
    BadSchedule(String),
    #[error("parameter vector has a non-finite entry at index {index}")]
    NonFiniteParam { index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid CMDP: {0}")]
    InvalidCmdp(String),
    #[error("linear system (I - gamma P) is singular")]
    SingularSystem,
    #[error("non-finite iterate in {stage} at t={t}, k={k}: {dump}")]
    NonFiniteIterate {
        stage: &'static str,
        t: usize,
        k: usize,
        dump: String,
    },
    #[error("prox solver diverged: iterate norm {norm} exceeds bound {bound}")]
    Diverged { norm: f64, bound: f64 },
    #[error("rate-fit window holds fewer than two positive points")]
    EmptyWindow,
    #[error("unknown synthetic problem '{0}'")]
    UnknownProblem(String),
    #[error("no grid point satisfies the constraint h(y) < c0")]
    InfeasibleEverywhere,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
