//! Feature Gaussian splatting with zero-shot appearance transfer.
//!
//! The crate is organized bottom-up: a small autodiff engine over dense
//! feature maps, scene and point-cloud I/O, the Gaussian field and its
//! differentiable rasterizer, an encoder/decoder stylizer driven by
//! per-channel statistics, the three training stages, and a cross-view
//! consistency evaluator.

pub mod autodiff;
pub mod camera;
pub mod consistency;
pub mod field;
pub mod error;
pub mod grid;
pub mod io;
pub mod raster;
pub mod stylizer;
pub mod train;

pub use error::{Error, Result};
pub use grid::{channel_stats, ChannelStats, Grid, STD_EPS};
