//! Perspective-aware multi-scale crowd density regression.

pub mod checks;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gt;
pub mod losses;
pub mod io;
pub mod map;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use map::{downsample_map, DownsampleMode, ValueMap};
pub use scalar::Real;

pub type ValueMap32 = ValueMap<f32>;
pub type ValueMap64 = ValueMap<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Model32 = model::PacnnModel<f32>;
pub type Model64 = model::PacnnModel<f64>;
pub type Camera32 = geometry::CameraModel<f32>;
pub type Camera64 = geometry::CameraModel<f64>;
