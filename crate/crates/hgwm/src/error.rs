use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid value for {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("position {position:?} is outside the workspace {lo:?}..{hi:?}")]
    OutOfWorkspace {
        position: [f64; 3],
        lo: [f64; 3],
        hi: [f64; 3],
    },

    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("autodiff usage error: {0}")]
    Autodiff(String),

    #[error("custom op `{op}` returned an adjoint of length {got} for input {input}, expected {expected}")]
    AdjointShape {
        op: String,
        input: usize,
        expected: usize,
        got: usize,
    },

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("observation has no points inside the workspace")]
    DegenerateObservation,

    #[error("regressor found no occupied cells")]
    EmptyScene,

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("scene spec error: {0}")]
    SceneSpec(String),

    #[error("task script error: {0}")]
    Script(String),

    #[error("checkpoint manifest mismatch: {0}")]
    Manifest(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
