use thiserror::Error;

/// Command failures, each with its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Runtime {
        stage: &'static str,
        #[source]
        source: rnf_core::Error,
    },
    #[error("undefined metrics: {0}")]
    UndefinedMetric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime { .. } => 2,
            CliError::UndefinedMetric(_) => 3,
        }
    }

    /// Core errors raised while validating configuration.
    pub fn from_core(e: rnf_core::Error) -> Self {
        CliError::Config(e.to_string())
    }

    /// Wraps a core error from `stage`; configuration problems keep exit code 1.
    pub fn at(stage: &'static str) -> impl FnOnce(rnf_core::Error) -> Self {
        move |e| match e {
            rnf_core::Error::Config(m) => CliError::Config(format!("{stage}: {m}")),
            source => CliError::Runtime { stage, source },
        }
    }
}
