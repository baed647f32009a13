//! Attention-based multiple-instance learning for multiplexed whole-slide
//! images, with discrete-time survival prediction.
//!
//! The crate covers the full path from raw channel planes to risk scores:
//! preprocessing (`pipeline`), per-patch channel fusion (`fusion`), bag
//! pooling (`pooling`), the survival head and loss (`survival`), evaluation
//! (`metrics`), and training (`trainer`). `numerics` holds the small
//! reverse-mode engine everything differentiable is built on.

pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod pooling;
pub mod selftest;
pub mod survival;
pub mod trainer;

pub use error::{Error, Result};
