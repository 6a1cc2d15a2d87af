//! Structured filter pruning with weight-dependent binary gates.
//!
//! The crate is `no_std` with `alloc`. Enable the `std` feature for SIMD
//! dispatch in the GEMM backend.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod efficiency;
pub mod error;
pub mod gates;
pub mod models;
pub mod optim;
pub mod pruner;
pub mod real;
pub mod tensor;

pub use autodiff::{BnMode, Graph, RunningStats, Var};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
