use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular covariance map: {0}")]
    SingularMap(String),
    #[error("quadrature domain error: {0}")]
    Domain(String),
    #[error("gauge error: {0}")]
    Gauge(String),
    #[error("time window alignment error: {0}")]
    Alignment(String),
    #[error("normalization error: {0}")]
    Normalization(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("stability error (CFL): {0}")]
    Stability(String),
    #[error("divergence detected: {0}")]
    Divergence(String),
    #[error("particle escaped the grid: {0}")]
    Escape(String),
    #[error("kernel support clipped by boundary: {0}")]
    Boundary(String),
    #[error("history window error: {0}")]
    Window(String),
    #[error("no convergence: {0}")]
    NonConvergence(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("{path}:{line}:{column}: parse error: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },
    #[error("audit refused: {0}")]
    Audit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
