//! Library surface of the `goursat` command-line tool: problem-file schema,
//! command implementations and report types. The binary in `main.rs` is a
//! thin argument-parsing wrapper so integration tests can drive the same
//! code paths directly.

pub mod commands;
pub mod problem;
pub mod report;

pub use commands::{cmd_analyze, cmd_jet, cmd_reconstruct, cmd_solve, SolveArtifacts};
pub use problem::ProblemFile;
pub use report::Report;

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CliErrorKind {
    /// Malformed problem file or schema violation.
    Schema,
    /// A mathematical precondition failed (characteristic datum, datum off
    /// the equation, non-transversal frame, ...).
    Precondition,
    /// A numerical procedure failed (Newton divergence, no relation found,
    /// reconstruction failure, ...).
    Numerical,
    /// Filesystem problems.
    Io,
}

impl CliErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            CliErrorKind::Schema => 2,
            CliErrorKind::Precondition => 3,
            CliErrorKind::Numerical => 4,
            CliErrorKind::Io => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CliErrorKind::Schema => "schema",
            CliErrorKind::Precondition => "precondition",
            CliErrorKind::Numerical => "numerical",
            CliErrorKind::Io => "io",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: CliErrorKind,
    pub message: String,
}

impl CliError {
    pub fn schema(message: impl Into<String>) -> Self {
        CliError {
            kind: CliErrorKind::Schema,
            message: message.into(),
        }
    }

    pub fn precondition(message: impl Into<String>) -> Self {
        CliError {
            kind: CliErrorKind::Precondition,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError {
            kind: CliErrorKind::Numerical,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError {
            kind: CliErrorKind::Io,
            message: message.into(),
        }
    }

    /// Machine-readable error object.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "error": {
                "kind": self.kind.name(),
                "message": self.message,
            }
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.name(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<goursat_core::charsolve::SolveError> for CliError {
    fn from(e: goursat_core::charsolve::SolveError) -> Self {
        use goursat_core::charsolve::SolveError as E;
        match &e {
            E::DatumNotOnEquation { .. } | E::CharacteristicDatum { .. } => {
                CliError::precondition(e.to_string())
            }
            _ => CliError::numerical(e.to_string()),
        }
    }
}

impl From<goursat_core::charsolve::MongeError> for CliError {
    fn from(e: goursat_core::charsolve::MongeError) -> Self {
        use goursat_core::charsolve::MongeError as E;
        match &e {
            E::NotFirstIntegral { .. } | E::SideMismatch { .. } => {
                CliError::precondition(e.to_string())
            }
            E::Solve(inner) => CliError::from_solve_ref(inner),
            _ => CliError::numerical(e.to_string()),
        }
    }
}

impl CliError {
    fn from_solve_ref(e: &goursat_core::charsolve::SolveError) -> Self {
        use goursat_core::charsolve::SolveError as E;
        match e {
            E::DatumNotOnEquation { .. } | E::CharacteristicDatum { .. } => {
                CliError::precondition(e.to_string())
            }
            _ => CliError::numerical(e.to_string()),
        }
    }
}

impl From<goursat_core::contact::DatumError> for CliError {
    fn from(e: goursat_core::contact::DatumError) -> Self {
        use goursat_core::contact::DatumError as E;
        match &e {
            E::RankDeficientDatum { .. } | E::NotIntegral { .. } => {
                CliError::precondition(e.to_string())
            }
            _ => CliError::numerical(e.to_string()),
        }
    }
}

impl From<goursat_core::mae::MaeError> for CliError {
    fn from(e: goursat_core::mae::MaeError) -> Self {
        use goursat_core::mae::MaeError as E;
        match &e {
            E::NonTransversal { .. } | E::ZeroField => CliError::precondition(e.to_string()),
            _ => CliError::numerical(e.to_string()),
        }
    }
}

impl From<goursat_core::jets::JetsError> for CliError {
    fn from(e: goursat_core::jets::JetsError) -> Self {
        use goursat_core::jets::JetsError as E;
        match &e {
            E::CharacteristicDatum { .. } | E::BadDatumVariable { .. } => {
                CliError::precondition(e.to_string())
            }
            _ => CliError::numerical(e.to_string()),
        }
    }
}

impl From<goursat_core::grassmann::GrassmannError> for CliError {
    fn from(e: goursat_core::grassmann::GrassmannError) -> Self {
        use goursat_core::grassmann::GrassmannError as E;
        match &e {
            E::BadVariable(_) => CliError::schema(e.to_string()),
            E::SingularPoint => CliError::precondition(e.to_string()),
            E::Eval(_) => CliError::numerical(e.to_string()),
        }
    }
}

impl From<goursat_core::expr::ParseError> for CliError {
    fn from(e: goursat_core::expr::ParseError) -> Self {
        CliError::schema(e.to_string())
    }
}

impl From<goursat_core::expr::EvalError> for CliError {
    fn from(e: goursat_core::expr::EvalError) -> Self {
        CliError::numerical(e.to_string())
    }
}
