pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),

    #[error("empty attention row{}", .row.map(|r| format!(" (query row {r})")).unwrap_or_default())]
    EmptyAttentionRow { row: Option<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid index set: {0}")]
    InvalidIndexSet(String),

    #[error("oracle scale exceeded: {len} entries (limit {limit})")]
    OracleScaleExceeded { len: usize, limit: usize },

    #[error("bad magic bytes {0:02x?}")]
    BadMagic(Vec<u8>),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("header validation failed: {0}")]
    HeaderValidation(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("checksum mismatch: header says {expected}, payload hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors raised while reading or decoding files.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::BadMagic(_)
                | Error::MalformedHeader(_)
                | Error::HeaderValidation(_)
                | Error::TruncatedPayload { .. }
                | Error::ChecksumMismatch { .. }
        )
    }
}
