use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),

    #[error("input geometry {found:?} does not match expected {expected:?}")]
    GeometryMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("bandwidth is zero: every vector in the joint batch is identical")]
    DegenerateBandwidth,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("row {row} is not a probability distribution")]
    InvalidDistribution { row: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("incompatible domains: {0}")]
    IncompatibleDomains(String),

    #[error("auxiliary domain is identical to the source domain")]
    DegenerateAuxiliary,

    #[error("shift destroys label information: {0}")]
    ShiftDestroysLabels(String),

    #[error("unbalanced classes: largest/smallest count ratio {ratio:.3} exceeds {limit}")]
    UnbalancedClasses { ratio: f64, limit: f64 },

    #[error("direction {dir} out of range for {num_directions} directions")]
    DirectionOutOfRange { dir: usize, num_directions: usize },

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("unknown attack method `{0}`")]
    UnknownMethod(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    InvalidConfig(Vec<String>),

    #[error("incomplete run directory {path}: missing {missing}")]
    IncompleteRun { path: PathBuf, missing: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// True for configuration problems (the CLI maps these to exit code 2).
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidConfig(_) | Error::InvalidSpec(_) => true,
            Error::Context { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Context {
            context: context(),
            source: Box::new(source),
        })
    }
}
