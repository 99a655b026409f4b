//! Command implementations behind the `rvd` binary.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 numeric failure,
//! 3 selfcheck failure.

pub mod commands;
pub mod config;

use std::fmt;

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(rvd_core::Error),
    /// Names of the failing checks.
    Selfcheck(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Core(e) if e.is_numeric() => 2,
            Self::Core(_) => 1,
            Self::Selfcheck(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "{m}"),
            Self::Core(e) => write!(f, "{e}"),
            Self::Selfcheck(names) => write!(f, "selfcheck failed: {}", names.join(", ")),
        }
    }
}

impl std::error::Error for CliError {}

impl From<rvd_core::Error> for CliError {
    fn from(e: rvd_core::Error) -> Self {
        Self::Core(e)
    }
}
