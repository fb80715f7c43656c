use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },

    #[error("label {label} at row {index} is outside [0, {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("{what} index {index} out of range (valid: {valid})")]
    Index {
        what: &'static str,
        index: usize,
        valid: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cascade contract violated at head {head}: {msg}")]
    Cascade { head: usize, msg: String },

    #[error("head {head}: {source}")]
    Head {
        head: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("ensemble stage mismatch: params for stage {expected}, got {got} inputs")]
    Stage { expected: usize, got: usize },

    #[error("training failed ({stage}): {msg}")]
    Training { stage: String, msg: String },

    #[error("gradient cosine undefined for head {head}: zero-norm gradient")]
    UndefinedCosine { head: usize },

    #[error("no threshold in the grid satisfies budget {budget}")]
    Infeasible { budget: String },

    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn training(stage: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Training {
            stage: stage.into(),
            msg: msg.into(),
        }
    }

    /// Coarse classification used by the command-line driver for exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_)
            | Error::Cascade { .. }
            | Error::Stage { .. }
            | Error::Index { .. } => ErrorKind::Config,
            Error::Format { .. } | Error::Io { .. } | Error::Label { .. } => ErrorKind::Data,
            Error::Head { source, .. } => source.kind(),
            Error::Infeasible { .. } => ErrorKind::Config,
            _ => ErrorKind::Numeric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}
