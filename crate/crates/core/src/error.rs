use thiserror::Error;

use compground_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("label is empty after whitespace split")]
    EmptyLabel,

    #[error("video `{0}` has no segments")]
    NoSegments(String),

    #[error("query `{0}` has no semantic structures")]
    NoStructures(String),

    #[error("segment {0} has no frames")]
    EmptySegment(usize),

    #[error("graph edges are already wired")]
    EdgesPresent,

    #[error("masking applies to video graphs only")]
    LanguageMask,

    #[error("{name} = {value} outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("interval [{0}, {1}] is not inside [0, 1] with start <= end")]
    InvalidInterval(f64, f64),

    #[error("label `{0}` is not in the classifier vocabulary")]
    UnknownLabel(String),

    #[error("invalid world spec: {0}")]
    InvalidWorld(String),

    #[error("infeasible covering: {table} {axis} `{component}` has no query that can go to training")]
    InfeasibleCovering {
        table: String,
        axis: &'static str,
        component: String,
    },

    #[error("split invariant {0} violated: {1}")]
    SplitInvariant(&'static str, String),

    #[error("sensitivity undefined: original recall is zero")]
    UndefinedSensitivity,

    #[error("missing prediction for query `{0}`")]
    MissingPrediction(String),

    #[error("config: unknown key `{0}`")]
    UnknownConfigKey(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Validation and configuration failures exit with status 2, everything
    /// else with 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::UnknownConfigKey(_) | Error::Config(_) | Error::OutOfRange { .. } | Error::InvalidWorld(_)
        )
    }

    /// Stable short tag used in single-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::InvalidAnnotation(_)
            | Error::EmptyLabel
            | Error::NoSegments(_)
            | Error::NoStructures(_)
            | Error::EmptySegment(_) => "annotation",
            Error::EdgesPresent | Error::LanguageMask => "graph",
            Error::OutOfRange { .. } | Error::InvalidInterval(..) => "range",
            Error::UnknownLabel(_) => "vocab",
            Error::InvalidWorld(_) => "world",
            Error::InfeasibleCovering { .. } | Error::SplitInvariant(..) => "split",
            Error::UndefinedSensitivity | Error::MissingPrediction(_) => "eval",
            Error::UnknownConfigKey(_) | Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::NotFound(_) => "not_found",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn check_unit(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name,
            value,
            range: "[0, 1]",
        })
    }
}
