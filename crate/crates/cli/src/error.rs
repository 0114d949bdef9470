use std::path::{Path, PathBuf};
use std::process::ExitCode;

use thiserror::Error;

/// Process exit statuses.
pub const EXIT_OK: u8 = 0;
pub const EXIT_PARSE: u8 = 2;
pub const EXIT_INVARIANT: u8 = 3;
pub const EXIT_DEGENERATE_TRAINING: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A value rejected by a core module's validation.
    #[error("invariant violation in {module}: {message}")]
    Invariant { module: &'static str, message: String },
}

impl CliError {
    pub fn exit_status(&self) -> u8 {
        match self {
            CliError::Invariant { .. } => EXIT_INVARIANT,
            _ => EXIT_PARSE,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.exit_status())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn input(path: &Path, message: impl ToString) -> Self {
        CliError::Input {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn invariant(module: &'static str, err: impl ToString) -> Self {
        CliError::Invariant {
            module,
            message: err.to_string(),
        }
    }
}

macro_rules! invariant_from {
    ($($ty:ty => $module:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::invariant($module, e)
            }
        })*
    };
}

invariant_from! {
    raymap::domain::DomainError => "domain",
    raymap::priors::PriorError => "priors",
    raymap::cluster::ClusterError => "cluster",
    raymap::calibrate::CalibrateError => "calibrate",
    raymap::synth::SynthError => "synth",
    raymap::eval::EvalError => "eval",
}
