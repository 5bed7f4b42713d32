//! Grounded video tokenization: convert a video into panoptic sub-object
//! trajectories via a split-track-merge pipeline, encode each trajectory into
//! one fixed-size token, and quantify token/FLOPs savings against space-time
//! patch tokenization.

pub mod autodiff;
pub mod bench;
pub mod encoder;
pub mod error;
pub mod keyframe;
pub mod pipeline;
pub mod segment;
pub mod store;
pub mod track;
pub mod training;
pub mod video;

pub use error::{Error, Result};
