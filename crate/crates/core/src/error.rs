use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("vector of length {len} does not fit {slots} slots")]
    SlotOverflow { len: usize, slots: usize },

    #[error("slot count mismatch: {0} vs {1}")]
    SlotCountMismatch(usize, usize),

    #[error("depth exhausted in `{context}`: {required} level(s) required, {available} available")]
    DepthExceeded {
        context: String,
        required: u32,
        available: u32,
    },

    #[error("key mismatch: ciphertext was produced under key {found:#018x}, engine holds {expected:#018x}")]
    KeyMismatch { expected: u64, found: u64 },

    #[error("secret key not loaded; this engine can only evaluate")]
    MissingSecretKey,

    #[error("refresh key not loaded; ciphertext refresh is unavailable")]
    MissingRefreshKey,

    #[error("refresh is disabled by the `{0}` policy")]
    RefreshDisabled(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("approximation error: {0}")]
    Approx(String),

    #[error("malformed file at offset {offset}: {what}")]
    Format { offset: u64, what: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unknown stage label `{0}`")]
    UnknownStage(String),

    #[error("budget check failed for `{stage}`: expected {expected} level(s), measured {measured}\n{ledger}")]
    BudgetMismatch {
        stage: String,
        expected: u32,
        measured: u32,
        ledger: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
