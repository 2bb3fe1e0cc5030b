//! 8-bit slice rendering.
//!
//! Axis mapping from a slice to image rows and columns:
//! `z` gives rows = y, cols = x; `y` gives rows = z, cols = x;
//! `x` gives rows = z, cols = y.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use longitrack_core::Coord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    Z,
    Y,
    X,
}

impl SliceAxis {
    pub fn index(self) -> usize {
        match self {
            SliceAxis::Z => 0,
            SliceAxis::Y => 1,
            SliceAxis::X => 2,
        }
    }

    /// `(slice, row, col)` coordinates of a voxel.
    pub fn project(self, p: Coord) -> (i64, i64, i64) {
        match self {
            SliceAxis::Z => (p[0], p[1], p[2]),
            SliceAxis::Y => (p[1], p[0], p[2]),
            SliceAxis::X => (p[2], p[0], p[1]),
        }
    }
}

/// `(window, level)` spanning the 1st to 99th percentile of `data`.
pub fn auto_window(data: &Array3<f32>) -> (f64, f64) {
    let mut v: Vec<f32> = data.iter().copied().collect();
    v.sort_by(f32::total_cmp);
    let at = |q: f64| v[((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)] as f64;
    let (lo, hi) = (at(0.01), at(0.99));
    (hi - lo, (hi + lo) / 2.0)
}

pub fn slice(data: &Array3<f32>, axis: SliceAxis, index: usize) -> Array2<f32> {
    data.index_axis(Axis(axis.index()), index).to_owned()
}

pub fn slice_bool(data: &Array3<bool>, axis: SliceAxis, index: usize) -> Array2<bool> {
    data.index_axis(Axis(axis.index()), index).to_owned()
}

/// Maps `[level - window/2, level + window/2]` onto `0..=255`. A window of
/// zero width renders uniform mid-gray.
pub fn to_u8(img: &Array2<f32>, window: f64, level: f64) -> Vec<u8> {
    if !(window > 0.0) || !window.is_finite() || !level.is_finite() {
        return vec![128; img.len()];
    }
    let lo = level - window / 2.0;
    img.iter()
        .map(|&v| (((v as f64 - lo) / window).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Mask pixels with a 4-neighbour outside the mask, as `[row, col]`.
pub fn contour(mask: &Array2<bool>) -> Vec<[usize; 2]> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] {
                continue;
            }
            let edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w
                || !mask[[r - 1, c]] || !mask[[r + 1, c]] || !mask[[r, c - 1]] || !mask[[r, c + 1]];
            if edge {
                out.push([r, c]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_window_is_mid_gray() {
        let img = Array2::from_elem((3, 4), 7.0f32);
        assert_eq!(to_u8(&img, 0.0, 7.0), vec![128; 12]);
        let d = Array3::from_elem((2, 3, 4), 7.0f32);
        let (w, l) = auto_window(&d);
        assert_eq!((w, l), (0.0, 7.0));
    }

    #[test]
    fn window_maps_range() {
        let img = Array2::from_shape_vec((1, 3), vec![0.0f32, 0.5, 1.0]).unwrap();
        assert_eq!(to_u8(&img, 1.0, 0.5), vec![0, 128, 255]);
    }

    #[test]
    fn projection_and_contour() {
        assert_eq!(SliceAxis::Y.project([1, 2, 3]), (2, 1, 3));
        let mut m = Array2::from_elem((5, 5), false);
        for r in 1..4 {
            for c in 1..4 {
                m[[r, c]] = true;
            }
        }
        let ring = contour(&m);
        assert_eq!(ring.len(), 8);
        assert!(!ring.contains(&[2, 2]));
    }
}
