use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] flowinterp::Error),
}

impl CliError {
    /// 3 for numerical divergence, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(flowinterp::Error::Diverged { .. }) => 3,
            _ => 2,
        }
    }
}
