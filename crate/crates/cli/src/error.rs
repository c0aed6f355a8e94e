use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, config or inputs.
    #[error("{0}")]
    Validation(String),

    /// Something failed while running an otherwise valid command.
    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Core(#[from] facegraph::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    /// 1 for validation failures, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        use facegraph::Error as E;
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Core(e) => match e {
                E::Shape { .. } | E::Invalid(_) | E::Adjacency(_) | E::Image { .. } | E::Container(_) => 1,
                E::NonFinite { .. } | E::Io { .. } => 2,
            },
        }
    }
}
