//! Mixture-of-view-experts neural renderer at desk scale.
//!
//! Pipeline: a convolutional feature extractor lifts posed source images to
//! feature maps; a view transformer with sparse top-K routed experts (plus a
//! permanent shared expert) aggregates epipolar features per 3D sample; a ray
//! transformer turns the per-ray sample tokens into RGB, with depth read off
//! its pooling attention. Training adds an expert-diversity regularizer and a
//! geometry-aware spatial-consistency loss on router distributions.

pub mod checkpoint;
pub mod dataset;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod moe;
pub mod renderer;
pub mod scene;
pub mod tensor;
pub mod training;

pub use tensor::{ParamId, ParamStore, Tape, Tensor, Var};
