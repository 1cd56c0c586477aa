//! Tensor building blocks on top of `candle-core`.

mod layers;
pub mod ops;
pub mod resize;
mod store;

pub use layers::{Attended, BatchNorm2d, Conv2d, LayerNorm, Linear, MultiHeadAttention};
pub use store::ParamStore;

use candle_core::Tensor;

use crate::error::Result;

/// Copy a tensor's values out as `f64`, whatever its dtype.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
}

/// Copy a tensor's values out as `f32`.
pub fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?)
}
