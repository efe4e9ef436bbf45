//! Shared-parameter attention / state-space sequence model.
//!
//! One weight set produces both `(Q, K, V)` for causal attention and `(C, B, x)`
//! for a selective state-space model. Each layer computes the tokens before its
//! transition point with attention and the rest with the SSM, seeding the SSM
//! with a state rebuilt exactly from the attention prefix's keys and values.
//!
//! The crate is `no_std` + `alloc`: it holds the tensor/autodiff engine, both
//! mechanisms, the state converter, the model, the schedule planner and the
//! training loop. File formats and the command line live in the `transmamba`
//! crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod converter;
pub mod dual;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod planner;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
