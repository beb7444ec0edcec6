use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("empty set")]
    EmptySet,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("version mismatch: file has version {found}, reader supports {supported}")]
    VersionMismatch { found: u16, supported: u16 },

    #[error("truncated: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("refusing to overwrite existing file {0} (use --force)")]
    AlreadyExists(PathBuf),

    #[error("unknown channel {0:?}")]
    UnknownChannel(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty forcing ring: no wavenumbers in [{lo}, {hi}]")]
    EmptyRing { lo: f64, hi: f64 },

    #[error("simulation blow-up at step {step}")]
    BlowUp { step: usize },

    #[error("score divergence at step {step}")]
    ScoreDivergence { step: usize },

    #[error("constant component in channel {channel:?} ({component}); cannot scale")]
    ConstantComponent { channel: String, component: &'static str },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("degenerate samples: {0}")]
    Degenerate(String),

    #[error("no positive rates")]
    NoPositiveRates,

    #[error("zero standard deviation in channel {0:?}")]
    ZeroStd(String),

    #[error("all-zero curve")]
    AllZeroCurve,

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
