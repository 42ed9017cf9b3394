//! Error type shared by all modules.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected:?}, got {got:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("incompatible architectures: {0}")]
    IncompatibleArchitecture(String),

    #[error("empty dataset: {0}")]
    EmptyData(String),

    #[error("misaligned targets: {0}")]
    MisalignedTargets(String),

    #[error("degenerate weights: weight sum must be positive")]
    DegenerateWeights,

    #[error("source image too small: {0}")]
    SourceTooSmall(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("insufficient points for clustering: {points} points < {clusters} clusters")]
    InsufficientPoints { points: usize, clusters: usize },

    #[error("selection target too large: {target} > pool size {pool}")]
    TargetTooLarge { target: usize, pool: usize },

    #[error("too many clients: {clients} clients > {samples} samples")]
    TooManyClients { clients: usize, samples: usize },

    #[error("invalid rate: {0} (must be in (0, 100])")]
    InvalidRate(f64),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite values produced by {0}")]
    NonFinite(&'static str),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
