use std::fmt;
use std::io;

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;
pub const EXIT_MISSING: i32 = 66;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn infeasible(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INFEASIBLE,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }

    /// Prefixes the message, keeping the exit code.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<unisafe::Error> for CliError {
    fn from(err: unisafe::Error) -> Self {
        use unisafe::Error as E;
        let code = match &err {
            E::Infeasible { .. } | E::Indeterminate { .. } => EXIT_INFEASIBLE,
            E::Parse { .. } | E::Schema(_) | E::Contract(_) => EXIT_DATA,
            E::Io(e) if e.kind() == io::ErrorKind::NotFound => EXIT_MISSING,
            _ => EXIT_INTERNAL,
        };
        Self {
            code,
            message: err.to_string(),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(err: io::Error) -> Self {
        unisafe::Error::Io(err).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        unisafe::Error::from(err).into()
    }
}

impl From<csv::Error> for CliError {
    fn from(err: csv::Error) -> Self {
        unisafe::Error::from(err).into()
    }
}

pub type CliResult<T> = Result<T, CliError>;
