//! Numerics for hyperbolic ranking-based retrieval and optimal-transport
//! cross-attention with cross-modal consistency, on a small reverse-mode tape.
//!
//! The crate is `no_std` and only needs `alloc`. Transcendental functions go
//! through `libm`, so results are bit-identical regardless of the host libc.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod hyperbolic;
pub mod losses;
pub mod model;
pub mod optim;
pub mod retrieval;
pub mod rng;
pub mod supervision;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
