use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};

/// Dense `(channels, z, y, x)` feature block in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub spatial: [usize; 3],
    pub data: Vec<f32>,
}

pub type FeatureMap = Tensor;

impl Tensor {
    pub fn zeros(channels: usize, spatial: [usize; 3]) -> Self {
        Self { channels, spatial, data: vec![0.0; channels * spatial.iter().product::<usize>()] }
    }

    pub fn from_vec(channels: usize, spatial: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n = channels * spatial.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Shape(format!("{} values for {channels}x{spatial:?}", data.len())));
        }
        Ok(Self { channels, spatial, data })
    }

    pub fn stack(channels: &[ArrayView3<f32>]) -> Result<Self> {
        let first = channels.first().ok_or(Error::EmptyInput)?;
        let d = first.dim();
        let spatial = [d.0, d.1, d.2];
        let mut data = Vec::with_capacity(channels.len() * first.len());
        for c in channels {
            if c.dim() != d {
                return Err(Error::Shape(format!("channel {:?} vs {:?}", c.dim(), d)));
            }
            data.extend(c.iter().copied());
        }
        Ok(Self { channels: channels.len(), spatial, data })
    }

    pub fn voxels(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_array(&self, c: usize) -> Array3<f32> {
        Array3::from_shape_vec(self.spatial, self.channel(c).to_vec()).expect("channel length matches spatial shape")
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.spatial == other.spatial
    }

    /// Reverses the tensor along the given spatial axes.
    pub fn flipped(&self, axes: [bool; 3]) -> Tensor {
        let [d, h, w] = self.spatial;
        let mut out = Tensor::zeros(self.channels, self.spatial);
        for c in 0..self.channels {
            for z in 0..d {
                let sz = if axes[0] { d - 1 - z } else { z };
                for y in 0..h {
                    let sy = if axes[1] { h - 1 - y } else { y };
                    let dst = ((c * d + z) * h + y) * w;
                    let src = ((c * d + sz) * h + sy) * w;
                    for x in 0..w {
                        let sx = if axes[2] { w - 1 - x } else { x };
                        out.data[dst + x] = self.data[src + sx];
                    }
                }
            }
        }
        out
    }
}
