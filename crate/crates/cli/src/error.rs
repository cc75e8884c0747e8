use std::fmt;
use std::process::ExitCode;

use corrnet::data::DataError;
use corrnet::eval::EvalError;
use corrnet::format::FormatError;
use corrnet::robust::RobustError;
use corrnet::training::TrainError;

/// Failure classes, each with its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Config,
    Io,
    Format,
    Invalid,
    Numeric,
    Checkpoint,
}

impl Class {
    pub fn code(self) -> u8 {
        // 2 is left to clap for usage errors.
        match self {
            Class::Config => 3,
            Class::Io => 4,
            Class::Format => 5,
            Class::Invalid => 6,
            Class::Numeric => 7,
            Class::Checkpoint => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Config => "config",
            Class::Io => "io",
            Class::Format => "format",
            Class::Invalid => "invalid",
            Class::Numeric => "numeric",
            Class::Checkpoint => "checkpoint",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub class: Class,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn new(class: Class, message: impl Into<String>) -> Self {
        Self { class, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Class::Config, message)
    }

    /// Prints `error=<class> <message>` on one line and returns the exit code.
    pub fn report(&self) -> ExitCode {
        eprintln!("{self}");
        ExitCode::from(self.class.code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.message.replace(['\n', '\r'], " ");
        write!(f, "error={} {}", self.class.name(), one_line)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(Class::Io, e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io(e) => e.into(),
            e => Self::new(Class::Format, e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig(m) => Self::config(m),
            DataError::Format(f) => f.into(),
            e @ DataError::Parse { .. } => Self::new(Class::Format, e.to_string()),
            e => Self::new(Class::Invalid, e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(m) => Self::config(m),
            TrainError::Format(f) => f.into(),
            e @ TrainError::NonFinite { .. } => Self::new(Class::Numeric, e.to_string()),
            e @ TrainError::Checkpoint(_) => Self::new(Class::Checkpoint, e.to_string()),
            e @ TrainError::Csv(_) => Self::new(Class::Io, e.to_string()),
            e => Self::new(Class::Invalid, e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            e @ EvalError::NoModel(_) => Self::config(e.to_string()),
            e @ (EvalError::Csv(_) | EvalError::Io(_)) => Self::new(Class::Io, e.to_string()),
            e => Self::new(Class::Invalid, e.to_string()),
        }
    }
}

impl From<RobustError> for CliError {
    fn from(e: RobustError) -> Self {
        match e {
            RobustError::InvalidConfig(m) => Self::config(m),
            e => Self::new(Class::Invalid, e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::new(Class::Io, e.to_string())
    }
}
