//! Single-class iris instance segmentation built from scratch: a residual
//! backbone with a feature pyramid, region proposals over square anchors,
//! ROI Align and class/box/mask heads, synthetic eye datasets, and NICE
//! style evaluation.

pub mod backbone;
pub mod config;
pub mod datasets;
pub mod detection;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod pipeline;

pub use error::{Error, Result};
