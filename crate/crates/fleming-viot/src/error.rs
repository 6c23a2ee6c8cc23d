//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("not a generator: {0}")]
    NotAGenerator(String),
    #[error("negative time: {0}")]
    NegativeTime(f64),
    #[error("degenerate normalizer: eta Q_t(1) = {0:e}")]
    DegenerateNormalizer(f64),
    #[error("generator support is reducible")]
    Reducible,
    #[error("principal eigenvalue is not simple: gap {0:e}")]
    DegenerateSpectrum(f64),
    #[error("eigenfunction has a non-positive entry")]
    NonpositiveEigenfunction,
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("Fleming-Viot kernel requires V >= 0, got V = {0} somewhere")]
    NegativePotentialForFV(f64),
    #[error("replacement sampling requested at a point with zero selection rate")]
    ZeroRate,
    #[error("potential yields K* = 0; selection clock is degenerate")]
    ZeroPotential,
    #[error("particle left the finite-float range (drift blowup?) at t = {0}")]
    NonFiniteState(f64),
    #[error("Lyapunov grid touches the singularity at the origin: |x| = {0}")]
    GridTouchesSingularity(f64),
    #[error("computed potential is unbounded on the probe grid: {0}")]
    UnboundedResult(String),
    #[error("invalid initial law: {0}")]
    InvalidInitialLaw(String),
    #[error("observed total selection rate {observed} exceeds N K* = {bound}")]
    RateBoundViolated { observed: f64, bound: f64 },
    #[error("insufficient replicas: need {need}, have {have}")]
    InsufficientReplicas { need: usize, have: usize },
    #[error("non-positive error value {0} cannot enter a log-log fit")]
    NonpositiveError(f64),
    #[error("exact oracle unavailable for this scenario (not finite-state)")]
    OracleUnavailable,
    #[error("config syntax error at line {line}, column {column}: {message}")]
    SyntaxError {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("config validation failed:\n{}", .0.join("\n"))]
    ValidationError(Vec<String>),
    #[error("replica {replica} failed: {source}")]
    ReplicaFailed {
        replica: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
