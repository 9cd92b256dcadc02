use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AngleError {
    #[error("angle must be finite, got {0}")]
    NonFinite(f64),
    #[error("semicircle class index must be 1 or 2, got {0}")]
    ClassIndex(u8),
    #[error("folded angle must lie in [0, π], got {0}")]
    FoldedOutOfRange(f64),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("malformed dataset at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("truncated dataset at byte {offset}: header declares {expected} samples, payload holds {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape contract violated: {0}")]
    Shape(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("freeze mask trains no component")]
    EmptyFreezeMask,
    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite {loss} loss ({value}) at stage {stage}, iteration {iteration}")]
    NonFiniteLoss {
        stage: u8,
        iteration: usize,
        loss: &'static str,
        value: f64,
    },
    #[error("frozen component {component} changed during stage {stage} at iteration {iteration}")]
    FreezeViolation {
        stage: u8,
        iteration: usize,
        component: &'static str,
    },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("image side {data} does not match model input side {model}")]
    SideMismatch { model: usize, data: usize },
    #[error("prediction count {predictions} does not match sample count {samples}")]
    LengthMismatch { predictions: usize, samples: usize },
    #[error("no ground truth boxes: recall is undefined")]
    NoGroundTruth,
    #[error("IoU threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("invalid AOS input: {0}")]
    InvalidInput(String),
    #[error("malformed report: {0}")]
    Report(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum KittiError {
    #[error("line {line}: expected 15 or 16 columns, found {found}")]
    ColumnCount { line: usize, found: usize },
    #[error("line {line}: column {column} ({name}) is not a number: `{text}`")]
    Number {
        line: usize,
        column: usize,
        name: &'static str,
        text: String,
    },
    #[error("line {line}: {reason}")]
    Invalid { line: usize, reason: String },
    #[error("prediction for image `{image}` line {line} has no score")]
    MissingScore { image: String, line: usize },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<KittiError>,
    },
    #[error("invalid difficulty filter: {0}")]
    InvalidFilter(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

impl NnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

impl TrainError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

impl EvalError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

impl KittiError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
