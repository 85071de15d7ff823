//! Minimal reverse-mode differentiation over dense row-major arrays.
//!
//! A `Tape` records every primitive operation applied to tensors it owns;
//! `backprop` replays the record in reverse, materializing gradients only for
//! the requested named leaves. The op set is exactly what the encoder, the
//! decoder, and the search losses need, nothing more.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::grad_check;
pub use params::NamedParamSet;
pub use tape::{NodeId, OpSpec, Tape};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("log of nonpositive value")]
    LogDomain,
    #[error("{op}: non-finite result")]
    NonFinite { op: &'static str },
    #[error("target {name:?} is not a leaf of this record")]
    UnknownTarget { name: String },
    #[error("duplicate leaf name {name:?}")]
    DuplicateLeaf { name: String },
    #[error("finite-difference step must be positive")]
    BadStep,
}
