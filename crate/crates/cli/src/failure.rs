use serde_json::json;
use thiserror::Error;

use crate::config::Violation;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Anything that stops a command, with the exit status it maps to.
#[derive(Debug, Error)]
pub enum Failure {
    #[error("configuration could not be parsed: {0}")]
    Parse(String),

    #[error("configuration has {} violation(s)", .0.len())]
    Config(Vec<Violation>),

    #[error("{context}: {source}")]
    Pipeline {
        context: String,
        #[source]
        source: spinflux::Error,
    },

    #[error("noise self-test failed {} check(s)", .0.len())]
    SelfTest(Vec<String>),

    #[error("{0}")]
    Io(String),
}

impl Failure {
    pub fn pipeline(context: impl Into<String>) -> impl FnOnce(spinflux::Error) -> Failure {
        let context = context.into();
        move |source| Failure::Pipeline { context, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Parse(_) | Failure::Config(_) => EXIT_CONFIG,
            Failure::SelfTest(_) => EXIT_NUMERICAL,
            Failure::Io(_) => EXIT_IO,
            Failure::Pipeline { source, .. } => match source {
                e if e.is_numerical() => EXIT_NUMERICAL,
                spinflux::Error::Io(_) | spinflux::Error::Json(_) => EXIT_IO,
                _ => EXIT_CONFIG,
            },
        }
    }

    fn category(&self) -> &'static str {
        match self.exit_code() {
            EXIT_CONFIG => "config",
            EXIT_NUMERICAL => "numerical",
            _ => "io",
        }
    }

    /// Machine-readable error report.
    pub fn report(&self) -> serde_json::Value {
        let mut r = json!({
            "status": "error",
            "category": self.category(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            Failure::Config(v) => r["violations"] = json!(v),
            Failure::SelfTest(f) => r["failures"] = json!(f),
            Failure::Pipeline { context, source } => {
                r["context"] = json!(context);
                r["detail"] = json!(source.to_string());
            }
            _ => {}
        }
        r
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Io(e.to_string())
    }
}
