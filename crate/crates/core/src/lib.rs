//! Single text-box placement for layered graphic layouts.
//!
//! Given a layout with one text element whose geometry is unknown, predict its
//! bounding box. The crate contains the layout model and rasterizer, box
//! metrics with the CIoU loss, a small reverse-mode NN stack, the
//! set-Transformer placement model and its trainer, a JSON prompt protocol for
//! external vision-language predictors, dataset tooling and the evaluation
//! harness.

pub mod data;
pub mod encoders;
pub mod eval;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;
pub mod vlm;
