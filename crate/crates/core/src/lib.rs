//! Self-supervised contrastive pretraining for rare-object recognition in
//! aerial imagery: momentum-queue instance discrimination, cross-level
//! instance-group discrimination, geometric view branches and view mixtures,
//! with the patch pipeline and downstream evaluation around them.

pub mod augment;
pub mod checkpoint;
pub mod cld;
pub mod desk;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod image;
pub mod mixgeo;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod trainer;
pub mod tiling;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
