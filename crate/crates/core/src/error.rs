use std::path::PathBuf;

/// Errors across the distillation pipeline, grouped by the exit-code
/// classes the CLI maps them to (config, data/format, numeric, missing
/// dependency).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("checksum mismatch in {path}: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("unsupported version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u16,
        expected: u16,
    },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("divergence at inner step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code class for the CLI: 2 config, 3 data/format,
    /// 4 numeric, 5 missing dependency.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::InfeasibleBudget(_) => 2,
            Error::Data(_)
            | Error::Format { .. }
            | Error::ChecksumMismatch { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. }
            | Error::Io { .. } => 3,
            Error::Degenerate(_) | Error::Divergence { .. } => 4,
            Error::MissingDependency(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
