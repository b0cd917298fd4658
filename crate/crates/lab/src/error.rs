use std::path::PathBuf;

/// Failures of a command, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stale artifact {path}: {detail}; remove it or choose a fresh --out directory")]
    Stale { path: PathBuf, detail: String },
    #[error("{0}")]
    Numerical(#[from] solfgr_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed artifact {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    /// 2 when the resonance channel precondition fails, 3 for other numerical failures,
    /// 4 for configuration and artifact problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Numerical(solfgr_core::Error::ChannelPrecondition { .. }) => 2,
            LabError::Numerical(_) => 3,
            _ => 4,
        }
    }

    /// Short machine-readable tag for structured error output.
    pub fn kind(&self) -> &'static str {
        use solfgr_core::Error as E;
        match self {
            LabError::Config(_) => "config",
            LabError::Stale { .. } => "stale_artifact",
            LabError::Io { .. } => "io",
            LabError::Format { .. } => "format",
            LabError::Numerical(e) => match e {
                E::ChannelPrecondition { .. } => "below_channel_threshold",
                E::NoGroundState { .. } => "no_ground_state",
                E::NoInternalMode(_) => "no_internal_mode",
                E::LimitingAbsorptionUnresolved(_) => "limiting_absorption_unresolved",
                E::OutsideTube(_) => "outside_tube",
                E::FitUnreliable(_) => "fit_unreliable",
                E::NonlinearSolver(_) => "nonlinear_solver",
                _ => "numerical",
            },
        }
    }
}

pub type LabResult<T> = std::result::Result<T, LabError>;
