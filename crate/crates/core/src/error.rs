use std::fmt;

/// Which factor of a Kronecker pair an error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Spatial,
    Pressure,
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Spatial => f.write_str("spatial"),
            Factor::Pressure => f.write_str("pressure"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{factor} factor is not positive definite (eigenvalue {value:e} at index {index})")]
    NotPositiveDefinite {
        factor: Factor,
        index: usize,
        value: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid granule: {0}")]
    Granule(String),

    #[error("{block} block failed: {source}")]
    Block {
        block: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dense model size cap exceeded: {observed} observations > cap {cap}")]
    SizeCap { observed: usize, cap: usize },

    #[error("chain has no samples")]
    EmptyChain,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("file format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn file(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Error::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn in_block(self, block: &'static str) -> Self {
        Error::Block {
            block,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
