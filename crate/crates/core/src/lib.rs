//! Core of a multi-teacher knowledge transfer trainer.
//!
//! A student network with a frozen, sentinel-initialized backbone and a
//! trainable adapter is aligned with several frozen teachers through three
//! loss families: student-to-teacher alignment, teacher-to-student
//! alignment in a shared latent space, and reconstruction of the teachers'
//! native features from that shared space.
//!
//! The crate is `no_std` (with `alloc`). File formats, configuration files
//! and the command line live in the `kpu` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod ablation;
pub mod autodiff;
pub mod data;
mod error;
pub mod features;
pub mod gradcheck;
pub mod hash;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod rng;
mod scalar;
pub mod stats;
pub mod student;
pub mod teacher;
mod tensor;
pub mod trainer;
pub mod weighting;

pub use autodiff::{OpKind, Tape, Var};
pub use error::{Error, Result};
pub use features::{FeatureSet, SpaceTag};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
