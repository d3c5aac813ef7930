use std::path::PathBuf;

use thiserror::Error;

use crate::optim::TrainTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset invariant violated: {0}")]
    Dataset(String),

    #[error("could not place sample {index} outside the margin band after {attempts} attempts")]
    MarginInfeasible { index: usize, attempts: usize },

    #[error("idx parse error in {file} at byte {offset}: {msg}")]
    Idx {
        file: String,
        offset: usize,
        msg: String,
    },

    #[error("symmetric initialization requires even width, got {0}")]
    OddWidth(usize),

    #[error("probability {0} outside the open interval (0, 1)")]
    Probability(f64),

    #[error("label {0} is not -1 or +1")]
    Label(f64),

    #[error("non-finite gradient entry at neuron {row}, column {col}")]
    NonFiniteGradient { row: usize, col: usize },

    #[error("training produced a non-finite risk at iteration {t}")]
    NonFiniteRisk { t: usize, partial: Box<TrainTrace> },

    #[error("teacher diverged at iteration {0}")]
    TeacherDiverged(usize),

    #[error("{0}")]
    Teacher(String),

    #[error("width {m} required by the bound exceeds the configured ceiling {ceiling}; use a smaller n or a looser target")]
    WidthCeiling { m: u64, ceiling: u64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
