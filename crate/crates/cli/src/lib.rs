//! Command implementations behind the `eventscore` binary. Each `cmd_*`
//! function writes its artifacts into an output directory and returns the
//! paths it wrote, so the commands are usable (and testable) without a shell.

pub mod commands;
pub mod config;
pub mod table;

pub use commands::{cmd_evaluate, cmd_fit, cmd_report, cmd_score, cmd_synth, SynthSource};
pub use config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] eventscore::Error),
    /// The model was written, but the solver hit its sweep limit.
    #[error("{0}")]
    NotConverged(String),
}

impl CliError {
    /// 0 success, 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        use eventscore::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::NotConverged(_) => 3,
            CliError::Core(e) => match e {
                E::Config(_) => 1,
                E::Numerical(_) => 3,
                E::Parse { .. } | E::Data(_) | E::Io(_) | E::Json(_) | E::Csv(_) => 2,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
