//! Multimodal token-prompted video segmentation at desk scale.
//!
//! Audio, text and video features are fused by a bidirectional transformer
//! into a learnable `[seg]` token that prompts a simplified promptable video
//! segmenter; the segmenter then tracks the referred object through the clip
//! with a FIFO memory bank.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod segmenter;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Result, SlvError};
