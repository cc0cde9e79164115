use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] strata_core::Error),

    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Config(String),

    #[error("{failed} of {total} gradient checks exceed relative error 1e-4: {names}")]
    GradCheck { failed: usize, total: usize, names: String },

    #[error("wall-clock budget of {budget_minutes} min exceeded after {elapsed_minutes:.1} min (finished: {finished})")]
    Budget {
        budget_minutes: f64,
        elapsed_minutes: f64,
        finished: String,
    },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::GradCheck { .. } => "gradcheck",
            CliError::Budget { .. } => "budget",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}
