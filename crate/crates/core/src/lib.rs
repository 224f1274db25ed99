//! Dynamic convolutions and sparse mixture-of-experts layers that add trainable
//! parameters at near-constant FLOPs, with an exact parameter/FLOPs accounting
//! engine, toy-scale models, and a deterministic training harness.

pub mod complexity;
pub mod error;
pub mod layers;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Prng;
pub use tensor::{Shape, Tape, Tensor, Var};
