use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid cluster size {0}: must be a power of two between 1 and 16")]
    InvalidClusterSize(usize),

    #[error("shared memory overflow on block {rank}: {requested} bytes requested, {in_use} of {capacity} in use")]
    SmemOverflow {
        rank: usize,
        requested: usize,
        in_use: usize,
        capacity: usize,
    },

    #[error("block {rank} has no buffer named `{name}`")]
    MissingBuffer { rank: usize, name: String },

    #[error("block {rank} already holds a buffer named `{name}` with a different shape")]
    BufferShapeChange { rank: usize, name: String },

    #[error("no rank {rank} in a cluster of {n_blocks}")]
    InvalidRank { rank: usize, n_blocks: usize },

    #[error("global memory has no tensor named `{0}`")]
    MissingTensor(String),

    #[error("index range {start}..{end} out of bounds for length {len}")]
    OutOfBounds { start: usize, end: usize, len: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("gather buffer on block {rank} holds {len} elements, expected {n_blocks} x {segment}")]
    GatherBufferSize {
        rank: usize,
        len: usize,
        n_blocks: usize,
        segment: usize,
    },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("degenerate calibration fixture: {0}")]
    DegenerateFixture(String),

    #[error("fixture parse error at line {line}: {message}")]
    FixtureParse { line: u64, message: String },
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
