//! Reverse-mode autodiff micro-framework built around the PR product family.
//!
//! The crate provides a define-by-run tape over dense f32 tensors, a family
//! of inner-product substitutes (P, R, PR, and two gradient-ablated P
//! variants) with custom backward rules, layers built on top of them
//! (fully connected, conv2d via im2col, LSTM), optimizers, dataset
//! parsers, and independent gradient oracles used to verify all of it.
//!
//! The crate is `no_std` + `alloc`; the `std` feature only enables runtime
//! SIMD detection in the matmul backend. All file and thread handling lives
//! in the companion CLI crate.

#![no_std]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;

#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod angle;
pub mod data;
pub mod error;
pub mod kernels;
pub mod layers;
pub mod math;
pub mod model;
pub mod optim;
pub mod product;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use product::ProductMode;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
