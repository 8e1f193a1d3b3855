//! Desk-scale training toolkit for honeycomb-XCT defect classification.
//!
//! The crate implements a complete pipeline around two-timescale learning
//! dynamics: a reverse-mode autodiff core, fast/slow linear projections, a
//! hybrid conv/state-space encoder, masked-image pretraining, a momentum
//! optimizer with a slow parameter trajectory, continual-learning metrics,
//! a synthetic honeycomb slice generator, and a CLI that ties the stages
//! together.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fdcheck;
pub mod kernels;
pub mod metrics;
pub mod mim;
pub mod nn;
pub mod optim;
pub mod params;
pub mod ssm;
pub mod synth;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
