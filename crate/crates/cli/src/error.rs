use std::fmt;

use cfscm_core::combat::CombatError;
use cfscm_core::data::DataError;
use cfscm_core::eval::EvalError;
use cfscm_core::flows::FlowError;
use cfscm_core::scm::ScmError;
use cfscm_core::synthdata::SynthError;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Usage,
    Data,
    Numeric,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Numeric => 3,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { kind: Kind::Usage, message: msg.into() }
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Self { kind: Kind::Data, message: msg.to_string() }
    }

    /// One JSON object per line on stderr.
    pub fn report(&self) -> String {
        serde_json::json!({
            "error": { "kind": self.kind, "code": self.kind.code(), "message": self.message }
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn flow_kind(e: &FlowError) -> Kind {
    match e {
        FlowError::NonFiniteParam(_) | FlowError::Num(_) => Kind::Numeric,
        FlowError::Domain { .. } | FlowError::Shape { .. } => Kind::Data,
    }
}

impl From<ScmError> for CliError {
    fn from(e: ScmError) -> Self {
        let kind = match &e {
            ScmError::NonFiniteLoss { .. } => Kind::Numeric,
            ScmError::Flow(f) => flow_kind(f),
            _ => Kind::Data,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        let kind = match &e {
            SynthError::UnknownPreset(_) => Kind::Usage,
            _ => Kind::Data,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::data(e)
    }
}

impl From<CombatError> for CliError {
    fn from(e: CombatError) -> Self {
        Self::data(e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let kind = match &e {
            EvalError::NonFinite { .. } | EvalError::Num(_) => Kind::Numeric,
            _ => Kind::Data,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::data(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
