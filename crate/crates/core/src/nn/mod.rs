//! Minimal CPU network layers with explicit backward passes.
//!
//! Parameters live in one flat buffer per network copy, which keeps the
//! momentum encoder, the optimizer state and checkpoints simple: every one
//! of them is an elementwise operation over a `Vec<T>`.

mod net;
mod scalar;

pub use net::{LayerSpec, Net, Shape, Tape};
pub use scalar::Scalar;
