//! Variational multi-modal prompt learning on a miniature frozen dual encoder.
//!
//! The crate is `no_std` (with `alloc`): all math goes through `libm`, all
//! randomness through seeded ChaCha streams, so results are reproducible bit
//! for bit across platforms and thread counts.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod ablate;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod variational;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
