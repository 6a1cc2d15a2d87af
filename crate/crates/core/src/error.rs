use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: channel mismatch, expected {expected}, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: wrong rank, expected {expected}, got {got}")]
    WrongRank {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward called on a graph that was already consumed")]
    DeadGraph,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),
    #[error("gate score is NaN at index {0}")]
    NanScore(usize),
    #[error("gate vector is not binary at index {0}")]
    NonBinaryGate(usize),
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("encoding is not decodable: {0}")]
    Undecodable(String),
    #[error("layer {0} cannot be gated: its output feeds a shortcut or it is the stem")]
    UngatableLayer(usize),
    #[error("invalid gate pattern: {0}")]
    InvalidGatePattern(String),
    #[error("truncated data: {len} bytes is not a whole number of {record}-byte records")]
    Truncated { len: usize, record: usize },
    #[error("missing parameter {0}")]
    MissingParameter(String),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
