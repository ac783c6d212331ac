use std::fmt;
use std::process::ExitCode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Config,
    Data,
    Numeric,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Usage,
            message: m.into(),
        }
    }

    pub fn config(m: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Config,
            message: m.into(),
        }
    }

    pub fn data(m: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Data,
            message: m.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self.kind {
            Kind::Usage => 2,
            Kind::Config => 3,
            Kind::Data => 4,
            Kind::Numeric => 5,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<signbench::Error> for CliError {
    fn from(e: signbench::Error) -> Self {
        let kind = match &e {
            signbench::Error::Config(_) => Kind::Config,
            signbench::Error::Numeric(_) => Kind::Numeric,
            _ => Kind::Data,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::data(e.to_string())
    }
}
