//! Core algorithms for multi-scale NDT scene tokenization.
//!
//! The crate is `no_std` (alloc required) and fully deterministic: identical
//! inputs, configuration, and seed produce bit-identical outputs regardless of
//! how callers schedule the work. All floating-point math goes through `libm`
//! so results do not depend on the platform's libm.
//!
//! Modules follow the pipeline order: [`cloud`] and [`ndt`] build the grid
//! statistics, [`encoder`] turns cells into per-scale features, [`msdec`]
//! fuses scales into a bounded token set and decodes prompts/masks, and
//! [`losses`] holds the training objectives. [`graph`] is the reverse-mode
//! autodiff engine backing every differentiable piece, verified by
//! [`check::finite_diff_check`].

#![no_std]

extern crate alloc;

#[cfg(test)]
#[macro_use]
extern crate std;

pub mod check;
pub mod cloud;
pub mod config;
pub mod encoder;
pub mod error;
pub mod fps;
pub mod graph;
pub mod linalg;
pub mod losses;
pub mod math;
pub mod msdec;
pub mod ndt;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use config::PipelineConfig;
pub use error::CoreError;
pub use tensor::Tensor;
