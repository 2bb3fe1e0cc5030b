//! Dense displacement fields and the warps built on them.
//!
//! A field stores, for every baseline voxel `x`, the displacement `u(x)` such
//! that `x + u(x)` is the corresponding follow-up position. Warping an image
//! into follow-up space therefore needs the inverse map, which is obtained by
//! fixed-point iteration.

use std::collections::BTreeMap;

use ndarray::{Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::volume::{in_bounds, shape_of, InstanceMask, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    disp: Array4<f32>,
}

impl DeformationField {
    pub fn new(disp: Array4<f32>) -> Result<Self> {
        if disp.dim().3 != 3 {
            return Err(Error::Shape(format!("field must end in 3 components, got {:?}", disp.dim())));
        }
        if disp.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("field contains NaN or Inf".into()));
        }
        Ok(Self { disp })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self { disp: Array4::zeros((shape[0], shape[1], shape[2], 3)) }
    }

    pub fn constant(shape: [usize; 3], d: [f64; 3]) -> Self {
        let mut disp = Array4::zeros((shape[0], shape[1], shape[2], 3));
        for (i, mut lane) in disp.axis_iter_mut(Axis(3)).enumerate() {
            lane.fill(d[i] as f32);
        }
        Self { disp }
    }

    /// Builds a field from per-component arrays.
    pub fn from_components(c: [Array3<f64>; 3]) -> Self {
        let s = shape_of(&c[0]);
        let disp = Array4::from_shape_fn((s[0], s[1], s[2], 3), |(z, y, x, k)| c[k][[z, y, x]] as f32);
        Self { disp }
    }

    pub fn disp(&self) -> &Array4<f32> {
        &self.disp
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.disp.dim();
        [d.0, d.1, d.2]
    }

    pub fn at(&self, p: [usize; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.disp[[p[0], p[1], p[2], k]] as f64;
        }
        out
    }

    pub fn component(&self, k: usize) -> Array3<f64> {
        self.disp.index_axis(Axis(3), k).mapv(|v| v as f64)
    }

    /// Trilinear sample with border clamping.
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let shape = self.shape();
        let (base, w) = trilinear_weights(p, shape);
        let mut out = [0.0; 3];
        for (corner, &wt) in w.iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            let idx = corner_index(base, corner, shape);
            for (k, o) in out.iter_mut().enumerate() {
                *o += wt * self.disp[[idx[0], idx[1], idx[2], k]] as f64;
            }
        }
        out
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = self.disp.len() / 3;
        let sum: f64 = self
            .disp
            .lanes(Axis(3))
            .into_iter()
            .map(|l| l.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
            .sum();
        sum / n as f64
    }

    /// Determinant of the Jacobian of `x + u(x)` at every voxel, by central
    /// differences (one-sided at the borders).
    pub fn jacobian_determinants(&self) -> Array3<f64> {
        let shape = self.shape();
        let comps = [self.component(0), self.component(1), self.component(2)];
        Array3::from_shape_fn(shape, |(z, y, x)| {
            let p = [z, y, x];
            let mut j = [[0.0f64; 3]; 3];
            for (a, row) in j.iter_mut().enumerate() {
                for (b, cell) in row.iter_mut().enumerate() {
                    *cell = partial(&comps[a], p, b, shape) + if a == b { 1.0 } else { 0.0 };
                }
            }
            det3(&j)
        })
    }

    pub fn min_jacobian(&self) -> f64 {
        self.jacobian_determinants().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Solves `y + u(y) = v` for `y` by fixed-point iteration.
    pub fn inverse_point(&self, v: [f64; 3]) -> [f64; 3] {
        let mut y = v;
        for _ in 0..400 {
            let u = self.sample(y);
            let next = [v[0] - u[0], v[1] - u[1], v[2] - u[2]];
            let delta = (0..3).map(|i| (next[i] - y[i]).abs()).fold(0.0, f64::max);
            y = next;
            if delta < 1e-5 {
                break;
            }
        }
        y
    }

    /// Baseline position that lands on each follow-up voxel.
    pub fn inverse_positions(&self) -> Array4<f64> {
        let s = self.shape();
        let mut out = Array4::zeros((s[0], s[1], s[2], 3));
        for z in 0..s[0] {
            for y in 0..s[1] {
                for x in 0..s[2] {
                    let p = self.inverse_point([z as f64, y as f64, x as f64]);
                    for k in 0..3 {
                        out[[z, y, x, k]] = p[k];
                    }
                }
            }
        }
        out
    }

    /// `x -> x + u(x) + other(x + u(x))`: this field followed by `other`.
    pub fn then(&self, other: &DeformationField) -> Result<DeformationField> {
        if other.shape() != self.shape() {
            return Err(Error::Shape("composed fields must share a grid".into()));
        }
        let s = self.shape();
        let mut disp = self.disp.clone();
        for z in 0..s[0] {
            for y in 0..s[1] {
                for x in 0..s[2] {
                    let u = self.at([z, y, x]);
                    let q = [z as f64 + u[0], y as f64 + u[1], x as f64 + u[2]];
                    let w = other.sample(q);
                    for k in 0..3 {
                        disp[[z, y, x, k]] = (u[k] + w[k]) as f32;
                    }
                }
            }
        }
        DeformationField::new(disp)
    }

    pub fn scaled(&self, factor: f64) -> DeformationField {
        Self { disp: self.disp.mapv(|v| (v as f64 * factor) as f32) }
    }
}

fn partial(c: &Array3<f64>, p: [usize; 3], axis: usize, shape: [usize; 3]) -> f64 {
    let n = shape[axis];
    if n < 2 {
        return 0.0;
    }
    let mut lo = p;
    let mut hi = p;
    let i = p[axis];
    let span = if i == 0 {
        hi[axis] = 1;
        1.0
    } else if i == n - 1 {
        lo[axis] = n - 2;
        1.0
    } else {
        lo[axis] = i - 1;
        hi[axis] = i + 1;
        2.0
    };
    (c[hi] - c[lo]) / span
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn trilinear_weights(p: [f64; 3], shape: [usize; 3]) -> ([usize; 3], [f64; 8]) {
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for i in 0..3 {
        let hi = (shape[i] - 1) as f64;
        let c = p[i].clamp(0.0, hi);
        let f = c.floor();
        base[i] = f as usize;
        frac[i] = c - f;
    }
    let mut w = [0.0; 8];
    for (corner, wt) in w.iter_mut().enumerate() {
        let mut v = 1.0;
        for i in 0..3 {
            let bit = (corner >> (2 - i)) & 1;
            v *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
        }
        *wt = v;
    }
    (base, w)
}

fn corner_index(base: [usize; 3], corner: usize, shape: [usize; 3]) -> [usize; 3] {
    let mut idx = base;
    for i in 0..3 {
        if (corner >> (2 - i)) & 1 == 1 {
            idx[i] = (base[i] + 1).min(shape[i] - 1);
        }
    }
    idx
}

/// Trilinear sample of a scalar array with border clamping.
pub fn sample_trilinear(a: &Array3<f32>, p: [f64; 3]) -> f64 {
    let shape = shape_of(a);
    let (base, w) = trilinear_weights(p, shape);
    w.iter()
        .enumerate()
        .filter(|(_, &wt)| wt != 0.0)
        .map(|(corner, &wt)| wt * a[corner_index(base, corner, shape)] as f64)
        .sum()
}

/// Pulls the baseline image into follow-up space (trilinear).
pub fn warp_image(volume: &Volume, field: &DeformationField) -> Result<Volume> {
    let inv = checked_inverse(volume.shape(), field)?;
    warp_image_with(volume, &inv)
}

fn warp_image_with(volume: &Volume, inv: &Array4<f64>) -> Result<Volume> {
    let s = volume.shape();
    let data = Array3::from_shape_fn(s, |(z, y, x)| {
        let q = [inv[[z, y, x, 0]], inv[[z, y, x, 1]], inv[[z, y, x, 2]]];
        sample_trilinear(volume.data(), q) as f32
    });
    Volume::with_origin(data, volume.spacing(), volume.origin())
}

fn checked_inverse(shape: [usize; 3], field: &DeformationField) -> Result<Array4<f64>> {
    if field.shape() != shape {
        return Err(Error::Shape(format!("field {:?} does not match volume {:?}", field.shape(), shape)));
    }
    Ok(field.inverse_positions())
}

/// Warped volume of each lesion, `sum over its baseline voxels of det J`.
pub fn warped_lesion_volumes(mask: &InstanceMask, field: &DeformationField) -> BTreeMap<u32, f64> {
    let jac = field.jacobian_determinants();
    let mut out = BTreeMap::new();
    for (idx, &l) in mask.labels().indexed_iter() {
        if l != 0 {
            *out.entry(l).or_insert(0.0) += jac[idx];
        }
    }
    out
}

/// Nearest-neighbour pull-back of the labels, then removal of every lesion
/// whose warped volume has collapsed below one voxel.
///
/// This is the definition of a synthetic follow-up mask.
pub fn warp_labels(mask: &InstanceMask, field: &DeformationField) -> Result<InstanceMask> {
    let inv = checked_inverse(mask.shape(), field)?;
    Ok(warp_labels_with(mask, field, &inv))
}

fn warp_labels_with(mask: &InstanceMask, field: &DeformationField, inv: &Array4<f64>) -> InstanceMask {
    let s = mask.shape();
    let collapsed: Vec<u32> = warped_lesion_volumes(mask, field)
        .into_iter()
        .filter(|&(_, v)| v < 1.0)
        .map(|(l, _)| l)
        .collect();
    let labels = Array3::from_shape_fn(s, |(z, y, x)| {
        let q = [
            inv[[z, y, x, 0]].round() as i64,
            inv[[z, y, x, 1]].round() as i64,
            inv[[z, y, x, 2]].round() as i64,
        ];
        if !in_bounds(q, s) {
            return 0;
        }
        let l = mask.labels()[[q[0] as usize, q[1] as usize, q[2] as usize]];
        if collapsed.contains(&l) {
            0
        } else {
            l
        }
    });
    InstanceMask::new(labels)
}

/// Warps image and mask together, sharing one inverse computation.
pub fn warp_pair(volume: &Volume, mask: &InstanceMask, field: &DeformationField) -> Result<(Volume, InstanceMask)> {
    mask.check_shape(volume)?;
    let inv = checked_inverse(volume.shape(), field)?;
    Ok((warp_image_with(volume, &inv)?, warp_labels_with(mask, field, &inv)))
}

/// Separable Gaussian smoothing with clamped borders; `sigma` in voxels.
pub fn gaussian_smooth(a: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return a.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut out = a.clone();
    for axis in 0..3 {
        let src = out.clone();
        let n = src.len_of(Axis(axis)) as i64;
        for (mut dst_lane, src_lane) in out.lanes_mut(Axis(axis)).into_iter().zip(src.lanes(Axis(axis))) {
            for i in 0..n {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let j = (i + k as i64 - radius).clamp(0, n - 1);
                    acc += w * src_lane[j as usize];
                }
                dst_lane[i as usize] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_is_identity_warp() {
        let data = Array3::from_shape_fn((5, 6, 7), |(z, y, x)| (z + 2 * y + 3 * x) as f32);
        let v = Volume::new(data, [1.0; 3]).unwrap();
        let mut m = InstanceMask::zeros([5, 6, 7]);
        m.labels_mut()[[2, 3, 3]] = 4;
        let f = DeformationField::zeros([5, 6, 7]);
        let (wv, wm) = warp_pair(&v, &m, &f).unwrap();
        assert_eq!(wv.data(), v.data());
        assert_eq!(wm, m);
        assert!((f.min_jacobian() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_field_shifts_labels() {
        let mut m = InstanceMask::zeros([10, 10, 10]);
        m.labels_mut()[[4, 4, 4]] = 1;
        let f = DeformationField::constant([10, 10, 10], [2.0, -1.0, 0.0]);
        let w = warp_labels(&m, &f).unwrap();
        assert_eq!(w.voxels(1), vec![[6, 3, 4]]);
    }

    #[test]
    fn inverse_of_affine_scaling() {
        // u(x) = 0.2 (x - c): follow-up = 1.2 (x - c) + c.
        let s = [12, 12, 12];
        let c = 6.0;
        let comps = [0, 1, 2].map(|_| Array3::from_shape_fn(s, |_| 0.0));
        let mut comps = comps;
        for (k, comp) in comps.iter_mut().enumerate() {
            for ((z, y, x), v) in comp.indexed_iter_mut() {
                let p = [z, y, x][k] as f64;
                *v = 0.2 * (p - c);
            }
        }
        let f = DeformationField::from_components(comps);
        let y = f.inverse_point([9.0, 6.0, 3.6]);
        assert!((y[0] - (6.0 + 3.0 / 1.2)).abs() < 1e-4);
        assert!((y[2] - (6.0 - 2.4 / 1.2)).abs() < 1e-4);
        assert!((f.min_jacobian() - 1.2f64.powi(3)).abs() < 1e-5);
    }

    #[test]
    fn fold_has_negative_jacobian() {
        let s = [8, 8, 8];
        let mut comps = [0, 1, 2].map(|_| Array3::<f64>::zeros(s));
        for ((_, _, x), v) in comps[2].indexed_iter_mut() {
            *v = -1.5 * x as f64;
        }
        let f = DeformationField::from_components(comps);
        assert!(f.min_jacobian() < 0.0);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let a = Array3::from_elem((6, 5, 4), 2.5);
        let b = gaussian_smooth(&a, 1.3);
        assert!(b.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }
}
