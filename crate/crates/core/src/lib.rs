//! Core of an unsupervised Siamese tracker trained with cycle consistency.
//!
//! Everything here is pure computation over `alloc` collections so the crate
//! builds under `no_std`. File formats, configuration files and the command
//! line live in the companion `ulast` crate.
#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod conv;
pub mod cpt;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod mask;
pub mod net;
pub mod optim;
pub mod runtime;
pub mod scenes;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::BoxF;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
