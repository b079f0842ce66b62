use alloc::string::String;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left_rows}x{left_cols} and {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("node {0} is not part of this graph")]
    UnknownNode(usize),
    #[error("gradient source must be 1x1, got {rows}x{cols}")]
    NonScalar { rows: usize, cols: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sequence length {len} exceeds n_max {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("layer {layer} out of range 0..={max}")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error("class {class} out of range 0..{classes}")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("tau {tau} out of range 1..={max}")]
    TauOutOfRange { tau: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("input contains no content tokens")]
    NoContentTokens,
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
