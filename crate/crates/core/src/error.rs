use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid dims ({n}, {c}, {h}, {w}): every axis must be >= 1")]
    InvalidDims { n: usize, c: usize, h: usize, w: usize },

    #[error("guard overflow: view addresses [{min}, {max}] but buffer allows [{lo}, {hi})")]
    GuardOverflow {
        min: isize,
        max: isize,
        lo: isize,
        hi: isize,
    },

    #[error("write would touch guard region at index {index} (buffer len {len})")]
    GuardWrite { index: isize, len: usize },

    #[error("{op} requires a row-major NCHW view")]
    NotDense { op: &'static str },

    #[error("{what} = {value} is not divisible by {by}")]
    NotDivisible {
        what: &'static str,
        value: usize,
        by: usize,
    },

    #[error("channel range [{c0}, {c1}) invalid for {channels} channels")]
    ChannelRange { c0: usize, c1: usize, channels: usize },

    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("channel shift needs {needed} spare elements after image {image}, only {available} available")]
    InsufficientReserve {
        image: usize,
        needed: usize,
        available: usize,
    },

    #[error("invalid stride {0}")]
    InvalidStride(usize),

    #[error("{op}: output view aliases an input buffer")]
    Aliased { op: &'static str },

    #[error("cannot compose {a} with {b}")]
    InvalidComposition { a: &'static str, b: &'static str },

    #[error("arena slot {slot} out of range ({slots} slots)")]
    SlotOutOfRange { slot: usize, slots: usize },

    #[error("unknown network '{0}'")]
    UnknownNetwork(String),

    #[error("invalid module config: {0}")]
    InvalidConfig(String),

    #[error("tape replay mismatch: {0}")]
    TapeMismatch(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed tensor file: {0}")]
    MalformedFile(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
