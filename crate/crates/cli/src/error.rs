//! Machine-parsable failure codes and their exit statuses.

use std::fmt;

use ctas_core::data::DataError;
use ctas_core::model::ModelError;
use ctas_core::synth::SynthError;
use ctas_core::training::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Code {
    Usage,
    Config,
    Io,
    Data,
    NoCkpt,
    BadCkpt,
    Model,
    Diverged,
    Gradcheck,
}

impl Code {
    pub fn as_str(self) -> &'static str {
        match self {
            Code::Usage => "E_USAGE",
            Code::Config => "E_CONFIG",
            Code::Io => "E_IO",
            Code::Data => "E_DATA",
            Code::NoCkpt => "E_NO_CKPT",
            Code::BadCkpt => "E_BAD_CKPT",
            Code::Model => "E_MODEL",
            Code::Diverged => "E_DIVERGED",
            Code::Gradcheck => "E_GRADCHECK",
        }
    }

    pub fn exit_status(self) -> i32 {
        match self {
            Code::Usage => 2,
            Code::Config => 3,
            Code::Io => 4,
            Code::Data => 5,
            Code::NoCkpt => 6,
            Code::BadCkpt => 7,
            Code::Model => 8,
            Code::Diverged => 9,
            Code::Gradcheck => 10,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub code: Code,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: Code, error: impl Into<anyhow::Error>) -> Self {
        Self { code, error: error.into() }
    }

    pub fn msg(code: Code, message: impl fmt::Display) -> Self {
        Self { code, error: anyhow::anyhow!("{message}") }
    }

    /// `error[CODE]: message` on a single line.
    pub fn line(&self) -> String {
        let text = format!("{:#}", self.error);
        let flat: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        format!("error[{}]: {}", self.code.as_str(), flat.join(" "))
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub trait WithCode<T> {
    fn code(self, code: Code) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> WithCode<T> for Result<T, E> {
    fn code(self, code: Code) -> CliResult<T> {
        self.map_err(|e| Failure::new(code, e))
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let code = match e {
            DataError::Io { .. } => Code::Io,
            _ => Code::Data,
        };
        Failure::new(code, e)
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        Failure::new(Code::Config, e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Data(d) => d.into(),
            ModelError::Config(_) => Failure::new(Code::Config, e),
            other => Failure::new(Code::Model, other),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Config(_) => Failure::new(Code::Config, e),
            TrainError::Diverged { .. } => Failure::new(Code::Diverged, e),
            TrainError::NoCheckpoint(_) => Failure::new(Code::NoCkpt, e),
            TrainError::Checkpoint { .. } => Failure::new(Code::BadCkpt, e),
            TrainError::Io { .. } => Failure::new(Code::Io, e),
        }
    }
}
