pub mod cascade;
pub mod config;
pub mod ct_data;
pub mod error;
pub mod eval;
pub mod fprnet;
pub mod hard_mining;
pub mod pipeline;
pub mod sampler;
pub mod segnet;

pub use error::{Error, Result};
pub use nodet_tensor::Scalar;

pub type Tensor32 = nodet_tensor::Tensor<f32>;
pub type Tensor64 = nodet_tensor::Tensor<f64>;
pub type VolumeF32 = ct_data::Volume<f32>;
pub type VolumeF64 = ct_data::Volume<f64>;
pub type NormalizedVolumeF32 = ct_data::NormalizedVolume<f32>;
pub type NormalizedVolumeF64 = ct_data::NormalizedVolume<f64>;
pub type SegModelF32 = segnet::SegModel<f32>;
pub type SegModelF64 = segnet::SegModel<f64>;
pub type ClfModelF32 = fprnet::ClfModel<f32>;
pub type ClfModelF64 = fprnet::ClfModel<f64>;
pub type DatasetF32 = pipeline::Dataset<f32>;
pub type DatasetF64 = pipeline::Dataset<f64>;
