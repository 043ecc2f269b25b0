//! Promptable segmentation for ultrasound images.
//!
//! The crate is organized bottom-up: [`numerics`] provides the differentiable
//! tensor tape, [`data`] the COCO data model and image transforms, [`prompts`]
//! prompt geometry, [`model`] the SAM-style network, [`losses`] and
//! [`training`] the fine-tuning loop, and [`eval`] the COCO-style metrics.

pub mod data;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod prompts;
pub mod training;

pub use numerics::{Graph, Tensor, TensorError, Var};
