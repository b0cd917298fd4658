use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("nonlinearity evaluated at negative argument s = {0}")]
    NegativeArgument(f64),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("no ground state found at omega = {omega}: {reason}")]
    NoGroundState { omega: f64, reason: String },
    #[error("eigensolver failure: {0}")]
    Eigensolver(String),
    #[error("no internal mode in the spectral gap at omega = {0}")]
    NoInternalMode(f64),
    #[error("resonant ratio: omega/lambda = {0} is an integer within tolerance")]
    ResonantRatio(f64),
    #[error("ill-conditioned {what}: condition number {condition:e}")]
    IllConditioned { what: String, condition: f64 },
    #[error("resolvent singular: mu = {mu} lies within {distance:e} of the point spectrum")]
    ResolventSingular { mu: f64, distance: f64 },
    #[error("below channel threshold: mu = {mu} must satisfy omega < mu < 3 omega with omega = {omega}")]
    ChannelPrecondition { mu: f64, omega: f64 },
    #[error("limiting absorption unresolved, refine grid (relative disagreement {0:e})")]
    LimitingAbsorptionUnresolved(f64),
    #[error("near resonance for pair ({m},{n}): distance {distance:e} to the point spectrum")]
    NearResonance { m: u32, n: u32, distance: f64 },
    #[error("expansion order {order} exceeds implemented depth {max}")]
    OrderTooHigh { order: usize, max: usize },
    #[error("nonlinear solver did not converge at step {0}")]
    NonlinearSolver(usize),
    #[error("outside modulation tube: {0}")]
    OutsideTube(String),
    #[error("fit unreliable: {0}")]
    FitUnreliable(String),
}
