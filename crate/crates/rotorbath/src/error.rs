use thiserror::Error;

/// Errors surfaced by the library, qualified by the subsystem that raised them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("spin: unsupported spin quantum number {0} (supported: 1/2, 1)")]
    UnsupportedSpin(f64),

    #[error("coupling: zero-length position vector")]
    ZeroLengthPosition,

    #[error("coupling: coincident nuclear positions")]
    CoincidentPositions,

    #[error("echo: revival-time denominator is zero (b_total and f_rot both zero)")]
    ZeroRevivalDenominator,

    #[error(
        "echo: propagator failed to converge; |dU| = {residual:.3e} after {refinements} \
         step halvings (tolerance {tolerance:.3e})"
    )]
    PropagatorConvergence {
        residual: f64,
        tolerance: f64,
        refinements: usize,
    },

    #[error("analysis: degenerate fit input (signal has no decay to fit)")]
    DegenerateFit,

    #[error("analysis: need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("analysis: fit samples must have distinct positive abscissae")]
    InvalidSamples,

    #[error("config: parse error in {path}: {message}")]
    ConfigParse { path: String, message: String },

    #[error("config: {key} = {value} outside allowed range {allowed}")]
    ConfigRange {
        key: String,
        value: String,
        allowed: String,
    },

    #[error("config: unknown scenario {0:?} (expected freqs|echo|fringes|t2map|hop)")]
    UnknownScenario(String),

    #[error("output: {0}")]
    Output(String),

    #[error("bath: malformed bath file at line {line}: {message}")]
    BathFile { line: usize, message: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
