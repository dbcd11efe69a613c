use thiserror::Error;

/// Errors surfaced by the identification / MPC pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("series too short: need at least {need} samples, got {got}")]
    SeriesTooShort { need: usize, got: usize },

    #[error("cutoff frequency {cutoff_hz} Hz is at or above Nyquist ({nyquist_hz} Hz)")]
    CutoffAboveNyquist { cutoff_hz: f64, nyquist_hz: f64 },

    #[error("series mismatch: {0}")]
    SeriesMismatch(String),

    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),

    #[error("identified alpha for {axis} axis is non-positive ({alpha})")]
    NonPositiveAlpha { axis: &'static str, alpha: f64 },

    #[error("steady-state map is rank deficient")]
    SteadyStateRankDeficient,

    #[error("Riccati iteration did not converge within {0} iterations")]
    RiccatiDiverged(usize),

    #[error("terminal gain does not stabilize the plant (spectral radius {0})")]
    UnstableTerminalGain(f64),

    #[error("terminal set determinacy index exceeds cap {0}")]
    DeterminacyCapExceeded(usize),

    #[error("QP solve failed: {status:?} (primal residual {primal:.3e}, dual residual {dual:.3e})")]
    QpFailed {
        status: crate::qp::QpStatus,
        primal: f64,
        dual: f64,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("time {t} outside scenario duration {duration}")]
    OutOfRange { t: f64, duration: f64 },

    #[error("malformed packet: {0}")]
    MalformedPacket(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("CSV parse error at line {line}: {message}")]
    CsvParse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
