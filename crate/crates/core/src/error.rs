//! Crate-wide error type and result alias.
//!
//! Errors are grouped by how a caller should react to them: `Shape` and
//! `Contract` indicate programmer misuse of an API, `Config` indicates bad
//! user input (CLI flags or config files), `Format`/`Io` indicate problems
//! with files on disk, `Numeric` indicates a non-finite value surfacing in a
//! computation, and `Capacity` indicates a request that would exceed the
//! configured memory budget. The CLI maps these groups onto distinct process
//! exit codes.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes produced by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or image dimensions do not satisfy an operation's requirements.
    #[error("shape error: {0}")]
    Shape(String),

    /// An API was called in a way its contract forbids (e.g. backward from a
    /// non-scalar node).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid user-facing configuration: unknown keys, out-of-range values,
    /// or inconsistent CLI flags.
    #[error("config error: {0}")]
    Config(String),

    /// A file's contents do not match the expected on-disk layout.
    #[error("format error: {0}")]
    Format(String),

    /// An I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A non-finite value (NaN or infinity) appeared where finite math is
    /// required. Training aborts on this rather than continuing silently.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The request would allocate more memory than the configured budget.
    #[error("capacity error: {0}")]
    Capacity(String),
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI uses for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Format(_) | Error::Io { .. } | Error::Shape(_) => 3,
            Error::Numeric(_) => 4,
            Error::Capacity(_) => 3,
        }
    }
}
