//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations on [`Var`]s are appended to a shared [`Tape`]. [`Tape::grad`]
//! replays the tape backwards; with `create_graph` the backward pass is
//! recorded too, which is what differentiating through an SGD step needs.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod rng;

mod backward;
mod ops;
mod params;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use kernels::Conv1dGeom;
pub use params::{grad_named, Param, ParameterSet, Vars};
pub use tape::{Tape, Var, MAX_LEVEL};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("gradient recording nested deeper than {max} levels")]
    NestingTooDeep { max: u8 },
    #[error("index {index} out of range for extent {len}")]
    Index { index: usize, len: usize },
    #[error("no parameter at `{0}`")]
    MissingParam(String),
    #[error("parameter `{0}` is frozen")]
    Frozen(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
