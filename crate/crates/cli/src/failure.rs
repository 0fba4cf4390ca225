use std::fmt;
use std::io::ErrorKind;

use cograca_core::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    MissingInput,
    InvalidInput,
    Invariant,
    Io,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::MissingInput => 3,
            Kind::InvalidInput => 4,
            Kind::Invariant => 5,
            Kind::Io => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::MissingInput => "missing-input",
            Kind::InvalidInput => "invalid-input",
            Kind::Invariant => "invariant",
            Kind::Io => "io",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Failure {
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Failure::new(Kind::Usage, message)
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Failure::new(Kind::InvalidInput, message)
    }
}

/// `error kind=<name> code=<n>: <message>` on one line.
impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat: Vec<&str> = self.message.split_whitespace().collect();
        write!(f, "error kind={} code={}: {}", self.kind.name(), self.kind.code(), flat.join(" "))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => Kind::MissingInput,
            Error::Io { .. } => Kind::Io,
            Error::Csv { source, .. } => match source.kind() {
                csv::ErrorKind::Io(io) if io.kind() == ErrorKind::NotFound => Kind::MissingInput,
                _ => Kind::InvalidInput,
            },
            Error::Validation { .. } | Error::Format(_) | Error::Json { .. } | Error::InvalidInput(_) => {
                Kind::InvalidInput
            }
            Error::Shape { .. } | Error::Numerical(_) => Kind::Invariant,
        };
        Failure::new(kind, e.to_string())
    }
}
