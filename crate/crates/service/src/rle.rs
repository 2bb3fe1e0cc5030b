//! Run-length encoded binary masks.
//!
//! A mask is sent as the box it occupies: `offset` is the box's first voxel
//! in volume coordinates and `shape` its extent. `counts` alternates
//! background and foreground run lengths over the box in `(z, y, x)` order
//! with x fastest, always starting with a (possibly empty) background run.

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub volume_shape: [usize; 3],
    pub offset: [usize; 3],
    pub shape: [usize; 3],
    pub counts: Vec<u32>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RleError {
    #[error("box {offset:?}+{shape:?} exceeds volume {volume:?}")]
    OutOfVolume { offset: [usize; 3], shape: [usize; 3], volume: [usize; 3] },
    #[error("runs cover {covered} voxels, box has {expected}")]
    Length { covered: usize, expected: usize },
}

impl RleMask {
    /// Encodes the part of `mask` inside the box at `offset` with `shape`.
    pub fn encode_box(mask: &Array3<bool>, offset: [usize; 3], shape: [usize; 3]) -> Result<Self, RleError> {
        let d = mask.dim();
        let volume = [d.0, d.1, d.2];
        if (0..3).any(|i| offset[i] + shape[i] > volume[i]) {
            return Err(RleError::OutOfVolume { offset, shape, volume });
        }
        let view = mask.slice(s![
            offset[0]..offset[0] + shape[0],
            offset[1]..offset[1] + shape[1],
            offset[2]..offset[2] + shape[2]
        ]);
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &v in view.iter() {
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
        counts.push(run);
        Ok(Self { volume_shape: volume, offset, shape, counts })
    }

    /// Encodes the whole volume.
    pub fn encode(mask: &Array3<bool>) -> Self {
        let d = mask.dim();
        Self::encode_box(mask, [0; 3], [d.0, d.1, d.2]).expect("full box fits")
    }

    pub fn decode(&self) -> Result<Array3<bool>, RleError> {
        let (o, sh, vol) = (self.offset, self.shape, self.volume_shape);
        if (0..3).any(|i| o[i] + sh[i] > vol[i]) {
            return Err(RleError::OutOfVolume { offset: o, shape: sh, volume: vol });
        }
        let expected: usize = sh.iter().product();
        let covered: usize = self.counts.iter().map(|&c| c as usize).sum();
        if covered != expected {
            return Err(RleError::Length { covered, expected });
        }
        let mut flat = Vec::with_capacity(expected);
        for (i, &c) in self.counts.iter().enumerate() {
            flat.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        let patch = Array3::from_shape_vec(sh, flat).expect("length checked");
        let mut out = Array3::from_elem(vol, false);
        out.slice_mut(s![o[0]..o[0] + sh[0], o[1]..o[1] + sh[1], o[2]..o[2] + sh[2]]).assign(&patch);
        Ok(out)
    }

    pub fn foreground(&self) -> usize {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as usize).sum()
    }
}
