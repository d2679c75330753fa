//! Exit-code classification. Every failure maps to one of three codes and is reported as a
//! single `error[<kind>]: <message>` line on stderr.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Check,
    Io,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Check => 3,
            Kind::Io => 4,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::Check => "check",
            Kind::Io => "io",
        }
    }
}

/// A failure raised by the CLI itself with an explicit kind.
#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub fn config(message: impl Into<String>) -> anyhow::Error {
    Failure {
        kind: Kind::Config,
        message: message.into(),
    }
    .into()
}

pub fn check(message: impl Into<String>) -> anyhow::Error {
    Failure {
        kind: Kind::Check,
        message: message.into(),
    }
    .into()
}

fn kind_of_library(e: &causaldpo::Error) -> Kind {
    use causaldpo::Error as E;
    match e {
        E::Io(_) => Kind::Io,
        E::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => Kind::Io,
        E::CheckFailed(_) | E::BoundViolated(_) => Kind::Check,
        _ => Kind::Config,
    }
}

/// The kind of the innermost classifiable cause; unclassified errors count as configuration.
pub fn classify(err: &anyhow::Error) -> Kind {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.kind;
        }
        if let Some(e) = cause.downcast_ref::<causaldpo::Error>() {
            return kind_of_library(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return Kind::Io;
        }
        if let Some(e) = cause.downcast_ref::<serde_json::Error>() {
            return if e.is_io() { Kind::Io } else { Kind::Config };
        }
    }
    Kind::Config
}

/// `error[<kind>]: <context>: <cause>` with any line breaks folded.
pub fn render(err: &anyhow::Error) -> String {
    let msg = format!("{err:#}").replace(['\n', '\r'], " ");
    format!("error[{}]: {msg}", classify(err).label())
}
