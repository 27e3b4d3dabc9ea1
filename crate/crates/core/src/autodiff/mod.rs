//! Minimal reverse-mode differentiation.
//!
//! A [`Tape`] records operations as they are evaluated. Values are computed
//! eagerly; nodes whose inputs do not require gradients are stored as
//! constants and never visited by [`Tape::backward`].

mod kernels;
mod tape;

pub use tape::{OpKind, Tape, Var};

pub(crate) use tape::PAD;
