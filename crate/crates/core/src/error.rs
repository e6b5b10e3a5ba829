use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the checkpoint engine.
///
/// Every variant maps onto a stable category string (see [`Error::category`])
/// which the command-line tool prints in its machine-readable error line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("metadata parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported metadata version {found} (supported: {supported})")]
    Version { found: i64, supported: i64 },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("lookup error: unknown tensor `{0}`")]
    Lookup(String),

    #[error("planning error: {0}")]
    Planning(String),

    #[error("resharding error: tensor `{fqn}` region offsets {offsets:?} lengths {lengths:?} is not covered by the checkpoint")]
    Resharding {
        fqn: String,
        offsets: Vec<u64>,
        lengths: Vec<u64>,
    },

    #[error("read error on `{file}` at offset {offset}: {reason}")]
    Read {
        file: String,
        offset: u64,
        reason: String,
    },

    #[error("storage error: {0}")]
    Storage(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("timeout: {0}")]
    Timeout(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Precondition(_) => "precondition",
            Error::Range(_) => "range",
            Error::Parse { .. } => "parse",
            Error::Version { .. } => "version",
            Error::Layout(_) => "layout",
            Error::Lookup(_) => "lookup",
            Error::Planning(_) => "planning",
            Error::Resharding { .. } => "resharding",
            Error::Read { .. } => "read",
            Error::Storage(_) | Error::Io(_) => "io",
            Error::Integrity(_) => "integrity",
            Error::Timeout(_) => "timeout",
            Error::Codec(_) => "codec",
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
        }
    }
}
