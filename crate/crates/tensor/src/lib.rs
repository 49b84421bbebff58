//! Minimal reverse-mode automatic differentiation over five-axis
//! `(batch, channel, depth, height, width)` tensors, generic over `f32`/`f64`.
//!
//! The engine covers exactly what 2D/3D segmentation and classification
//! networks need: strided and transposed convolution, window max-pooling,
//! cropping, channel concatenation, batch normalization, PReLU, sigmoid,
//! softmax, dropout, and Dice / cross-entropy losses. Convolutions lower to a
//! strided GEMM.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use ops::conv::ConvGeom;
pub use ops::pool::{AxisWindows, PoolPlan};
pub use params::{ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::{Shape, Tensor};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
