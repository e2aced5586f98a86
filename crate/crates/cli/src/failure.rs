//! Error classes and their exit codes.

use protogate::data::DataError;
use protogate::experiment::ExperimentError;
use protogate::model::ModelError;
use protogate::train::TrainError;
use std::fmt;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }

    pub fn data(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_DATA,
            error: error.into(),
        }
    }

    /// Adds a line of context without changing the class.
    pub fn context(self, what: impl fmt::Display + Send + Sync + 'static) -> Self {
        Self {
            code: self.code,
            error: self.error.context(what),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::InvalidConfig { .. } => EXIT_USAGE,
        TrainError::NumericalFailure { .. } => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn experiment_code(e: &ExperimentError) -> u8 {
    match e {
        ExperimentError::Run { source, .. } => experiment_code(source),
        ExperimentError::Train(t) => train_code(t),
        ExperimentError::Model(m) => model_code(m),
        ExperimentError::EmptyGrid => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Train(t) => train_code(t),
        _ => EXIT_DATA,
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Self {
            code: experiment_code(&e),
            error: e.into(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        Self {
            code: train_code(&e),
            error: e.into(),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Self {
            code: model_code(&e),
            error: e.into(),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Self::data(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::data(e)
    }
}
