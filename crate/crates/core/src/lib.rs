//! Panoptic segmentation forecasting on synthetic driving scenes.

mod codec;
pub mod assembly;
pub mod error;
pub mod geometry;
pub mod maps;
pub mod metrics;
pub mod odom;
pub mod pipeline;
pub mod scene;
pub mod stuff;
pub mod things;
pub mod tracks;
pub mod training;

pub use error::{Error, Result};
