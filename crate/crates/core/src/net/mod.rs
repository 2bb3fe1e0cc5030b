//! Residual-encoder U-Net with prompt channels and temporal skip fusion.

pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod tensor;

pub use model::{fuse_input, predict_lesion, predict_lesion_from, prompt_block, sigmoid, voi_inputs, FusionMode, LesionPrediction, Model, NetConfig};
pub use tensor::{FeatureMap, Tensor};

use crate::error::{Error, Result};

/// `xt * InstNorm(xt - x0) + xt` without affine parameters.
pub fn diff_weight(x0: &FeatureMap, xt: &FeatureMap, epsilon: f64) -> Result<FeatureMap> {
    if !x0.same_shape(xt) {
        return Err(Error::Shape(format!(
            "{}x{:?} vs {}x{:?}",
            x0.channels, x0.spatial, xt.channels, xt.spatial
        )));
    }
    let (data, _) = kernels::diff_weight_forward(&x0.data, &xt.data, xt.channels, epsilon as f32, None);
    Tensor::from_vec(xt.channels, xt.spatial, data)
}
