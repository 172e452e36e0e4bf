//! Multi-scale pixel decoder driven by a segmentation codebook, with mask
//! losses, multi-target evaluation and data tooling.
//!
//! The numeric core is generic over [`numeric::Scalar`] (`f32` or `f64`);
//! the aliases below fix the precision for the common cases.

pub mod codebook;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod matcheval;
pub mod model;
pub mod nn;
pub mod numeric;
pub mod train;

pub use error::{Error, Result};

pub type Tensor64 = numeric::Tensor<f64>;
pub type Tensor32 = numeric::Tensor<f32>;
pub type Tape64 = numeric::Tape<f64>;
pub type Tape32 = numeric::Tape<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type Model64 = model::PixelModel<f64>;
pub type Model32 = model::PixelModel<f32>;
