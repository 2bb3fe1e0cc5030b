//! Volumes, label masks, prompt points and the VOI crop.
//!
//! All arrays are indexed `(z, y, x)`. Prompt coordinates are voxel indices;
//! physical spacing is carried alongside for metric computation only.

use std::collections::BTreeSet;

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel coordinate `(z, y, x)`. Signed so that out-of-volume positions can be
/// represented before clamping or padding.
pub type Coord = [i64; 3];

pub fn shape_of<T>(a: &Array3<T>) -> [usize; 3] {
    let d = a.dim();
    [d.0, d.1, d.2]
}

pub fn in_bounds(p: Coord, shape: [usize; 3]) -> bool {
    (0..3).all(|i| p[i] >= 0 && (p[i] as usize) < shape[i])
}

pub fn clamp_to(p: Coord, shape: [usize; 3]) -> Coord {
    let mut out = p;
    for i in 0..3 {
        out[i] = p[i].clamp(0, shape[i] as i64 - 1);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3]) -> Result<Self> {
        Self::with_origin(data, spacing, [0.0; 3])
    }

    pub fn with_origin(data: Array3<f32>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if data.iter().len() == 0 {
            return Err(Error::InvalidVolume("every extent must be at least 1".into()));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidVolume(format!("spacing must be positive, got {spacing:?}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("data contains NaN or Inf".into()));
        }
        Ok(Self { data, spacing, origin })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn shape(&self) -> [usize; 3] {
        shape_of(&self.data)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn get(&self, p: Coord) -> Option<f32> {
        in_bounds(p, self.shape()).then(|| self.data[[p[0] as usize, p[1] as usize, p[2] as usize]])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    labels: Array3<u32>,
}

impl InstanceMask {
    pub fn new(labels: Array3<u32>) -> Self {
        Self { labels }
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self { labels: Array3::zeros(shape) }
    }

    pub fn labels(&self) -> &Array3<u32> {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut Array3<u32> {
        &mut self.labels
    }

    pub fn shape(&self) -> [usize; 3] {
        shape_of(&self.labels)
    }

    pub fn instance_ids(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().filter(|&l| l != 0).collect()
    }

    pub fn contains(&self, lesion_id: u32) -> bool {
        lesion_id != 0 && self.labels.iter().any(|&l| l == lesion_id)
    }

    pub fn count(&self, lesion_id: u32) -> usize {
        self.labels.iter().filter(|&&l| l == lesion_id).count()
    }

    pub fn voxels(&self, lesion_id: u32) -> Vec<Coord> {
        self.labels
            .indexed_iter()
            .filter(|(_, &l)| l == lesion_id)
            .map(|((z, y, x), _)| [z as i64, y as i64, x as i64])
            .collect()
    }

    /// Binary mask of one lesion.
    pub fn binary(&self, lesion_id: u32) -> Array3<bool> {
        self.labels.mapv(|l| l == lesion_id && lesion_id != 0)
    }

    pub fn check_shape(&self, volume: &Volume) -> Result<()> {
        if self.shape() != volume.shape() {
            return Err(Error::Shape(format!(
                "mask {:?} does not match volume {:?}",
                self.shape(),
                volume.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Baseline,
    Proposed,
    Verified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptPoint {
    pub coord: Coord,
    pub role: PromptRole,
    pub lesion_id: u32,
}

impl PromptPoint {
    pub fn new(coord: Coord, role: PromptRole, lesion_id: u32) -> Self {
        Self { coord, role, lesion_id }
    }

    pub fn with_role(self, role: PromptRole) -> Self {
        Self { role, ..self }
    }

    pub fn check_within(&self, shape: [usize; 3]) -> Result<()> {
        if in_bounds(self.coord, shape) {
            Ok(())
        } else {
            Err(Error::OutOfBounds { point: self.coord, shape })
        }
    }
}

/// The in-mask voxel nearest to the lesion's mean voxel coordinate.
///
/// Ties are broken by lexicographic `(z, y, x)` order. The returned role is
/// `Verified`, matching its use as the ground-truth follow-up click.
pub fn centroid(mask: &InstanceMask, lesion_id: u32) -> Result<PromptPoint> {
    let voxels = mask.voxels(lesion_id);
    if voxels.is_empty() || lesion_id == 0 {
        return Err(Error::MissingLesion(lesion_id));
    }
    // Exact integer arithmetic: compare |n*v - sum|^2, which orders like |v - mean|^2.
    let n = voxels.len() as i128;
    let mut sum = [0i128; 3];
    for v in &voxels {
        for i in 0..3 {
            sum[i] += v[i] as i128;
        }
    }
    // voxels() iterates in lexicographic order, so a strict comparison keeps the first tie.
    let mut best = voxels[0];
    let mut best_d = i128::MAX;
    for v in voxels {
        let d: i128 = (0..3).map(|i| (n * v[i] as i128 - sum[i]).pow(2)).sum();
        if d < best_d {
            best_d = d;
            best = v;
        }
    }
    Ok(PromptPoint::new(best, PromptRole::Verified, lesion_id))
}

/// Placement of a fixed-size VOI inside a larger volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoiWindow {
    /// Volume coordinate of patch index `(0, 0, 0)`; may be negative.
    pub start: Coord,
    pub size: [usize; 3],
}

impl VoiWindow {
    /// For extent `n` the center lands on patch index `n / 2` (left-biased for even `n`).
    pub fn centered(center: Coord, size: [usize; 3]) -> Self {
        let mut start = [0i64; 3];
        for i in 0..3 {
            start[i] = center[i] - (size[i] / 2) as i64;
        }
        Self { start, size }
    }

    pub fn to_volume(&self, local: Coord) -> Coord {
        [local[0] + self.start[0], local[1] + self.start[1], local[2] + self.start[2]]
    }

    pub fn to_local(&self, global: Coord) -> Coord {
        [global[0] - self.start[0], global[1] - self.start[1], global[2] - self.start[2]]
    }
}

/// Extracts `window` from `source`, filling out-of-range voxels with `pad`.
pub fn crop_array<T: Copy>(source: &Array3<T>, window: &VoiWindow, pad: T) -> Array3<T> {
    let shape = shape_of(source);
    Array3::from_shape_fn(window.size, |(z, y, x)| {
        let g = window.to_volume([z as i64, y as i64, x as i64]);
        if in_bounds(g, shape) {
            source[[g[0] as usize, g[1] as usize, g[2] as usize]]
        } else {
            pad
        }
    })
}

/// Writes a patch back into a zero-initialised array of `shape`, dropping out-of-range voxels.
pub fn paste_array<T: Copy + Default>(patch: &Array3<T>, window: &VoiWindow, shape: [usize; 3]) -> Array3<T> {
    let mut out = Array3::from_elem(shape, T::default());
    for ((z, y, x), &v) in patch.indexed_iter() {
        let g = window.to_volume([z as i64, y as i64, x as i64]);
        if in_bounds(g, shape) {
            out[[g[0] as usize, g[1] as usize, g[2] as usize]] = v;
        }
    }
    out
}

/// VOI extraction centered on a prompt. `pad` defaults to the source minimum.
pub fn crop_pad(volume: &Volume, center: &PromptPoint, size: [usize; 3], pad: Option<f32>) -> Result<Volume> {
    if size.contains(&0) {
        return Err(Error::Shape(format!("VOI size must be positive, got {size:?}")));
    }
    let pad = pad.unwrap_or_else(|| volume.min());
    let window = VoiWindow::centered(center.coord, size);
    let data = crop_array(volume.data(), &window, pad);
    Volume::with_origin(data, volume.spacing(), volume.origin())
}

/// Elementwise `a & b` count, used by overlap metrics and tests.
pub fn intersection_count(a: &Array3<bool>, b: &Array3<bool>) -> usize {
    let mut n = 0usize;
    Zip::from(a).and(b).for_each(|&p, &q| n += (p && q) as usize);
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    fn mask_from(shape: [usize; 3], voxels: &[Coord], id: u32) -> InstanceMask {
        let mut m = InstanceMask::zeros(shape);
        for v in voxels {
            m.labels_mut()[[v[0] as usize, v[1] as usize, v[2] as usize]] = id;
        }
        m
    }

    fn brute_nearest(voxels: &[Coord]) -> Coord {
        let n = voxels.len() as f64;
        let mean: Vec<f64> = (0..3).map(|i| voxels.iter().map(|v| v[i] as f64).sum::<f64>() / n).collect();
        let mut sorted = voxels.to_vec();
        sorted.sort();
        let dist = |v: &Coord| (0..3).map(|i| (v[i] as f64 - mean[i]).powi(2)).sum::<f64>();
        let best = sorted.iter().map(dist).fold(f64::INFINITY, f64::min);
        *sorted.iter().find(|v| dist(v) == best).unwrap()
    }

    #[test]
    fn centroid_single_voxel() {
        let m = mask_from([8, 8, 8], &[[4, 4, 4]], 1);
        assert_eq!(centroid(&m, 1).unwrap().coord, [4, 4, 4]);
    }

    #[test]
    fn centroid_cube() {
        let mut vox = vec![];
        for z in 2..5 {
            for y in 2..5 {
                for x in 2..5 {
                    vox.push([z, y, x]);
                }
            }
        }
        let m = mask_from([8, 8, 8], &vox, 2);
        assert_eq!(centroid(&m, 2).unwrap().coord, [3, 3, 3]);
    }

    #[test]
    fn centroid_c_shape_stays_inside() {
        // A C-shaped ring in one slice: the mean falls in the hole.
        let mut vox = vec![];
        for y in 1..8i64 {
            for x in 1..8i64 {
                let ring = y == 1 || y == 7 || x == 1;
                if ring {
                    vox.push([3, y, x]);
                }
            }
        }
        let m = mask_from([6, 10, 10], &vox, 1);
        let c = centroid(&m, 1).unwrap().coord;
        assert!(vox.contains(&c));
        assert_eq!(c, brute_nearest(&vox));
    }

    #[test]
    fn centroid_missing_lesion() {
        let m = InstanceMask::zeros([4, 4, 4]);
        assert!(matches!(centroid(&m, 3), Err(Error::MissingLesion(3))));
    }

    fn ramp(shape: [usize; 3]) -> Volume {
        let data = Array3::from_shape_fn(shape, |(z, y, x)| (z * 100 + y * 10 + x) as f32);
        Volume::new(data, [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn interior_crop_matches_slicing() {
        let v = ramp([12, 12, 12]);
        let p = PromptPoint::new([6, 6, 6], PromptRole::Baseline, 1);
        let c = crop_pad(&v, &p, [5, 4, 3], None).unwrap();
        let expected = v.data().slice(s![4..9, 4..8, 5..8]).to_owned();
        assert_eq!(c.data(), &expected);
    }

    #[test]
    fn corner_crop_pads_with_minimum() {
        let v = ramp([6, 6, 6]);
        let p = PromptPoint::new([0, 0, 0], PromptRole::Baseline, 1);
        let c = crop_pad(&v, &p, [8, 8, 8], Some(-5.0)).unwrap();
        for z in 0..8i64 {
            for y in 0..8i64 {
                for x in 0..8i64 {
                    let g = [z - 4, y - 4, x - 4];
                    let expected = v.get(g).unwrap_or(-5.0);
                    assert_eq!(c.data()[[z as usize, y as usize, x as usize]], expected);
                }
            }
        }
        let d = crop_pad(&v, &p, [8, 8, 8], None).unwrap();
        assert_eq!(d.data()[[0, 0, 0]], v.min());
    }

    #[test]
    fn full_volume_crop() {
        let v = ramp([8, 7, 6]);
        let p = PromptPoint::new([4, 3, 3], PromptRole::Baseline, 1);
        let c = crop_pad(&v, &p, [8, 7, 6], None).unwrap();
        assert_eq!(c.data(), v.data());
    }

    #[test]
    fn rejects_non_finite_and_bad_spacing() {
        let mut d = Array3::<f32>::zeros((2, 2, 2));
        d[[0, 0, 0]] = f32::NAN;
        assert!(Volume::new(d, [1.0; 3]).is_err());
        assert!(Volume::new(Array3::zeros((2, 2, 2)), [1.0, 0.0, 1.0]).is_err());
        assert!(Volume::new(Array3::zeros((0, 2, 2)), [1.0; 3]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn crop_center_reads_source(z in 0i64..10, y in 0i64..9, x in 0i64..7,
                                    sz in 1usize..9, sy in 1usize..9, sx in 1usize..9) {
            let v = ramp([10, 9, 7]);
            let p = PromptPoint::new([z, y, x], PromptRole::Baseline, 1);
            let c = crop_pad(&v, &p, [sz, sy, sx], None).unwrap();
            proptest::prop_assert_eq!(c.data()[[sz / 2, sy / 2, sx / 2]], v.get([z, y, x]).unwrap());
        }

        #[test]
        fn centroid_translation_invariant(tz in 0i64..4, ty in 0i64..4, tx in 0i64..4, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut vox: Vec<Coord> = (0..6).map(|_| [rng.random_range(0..5), rng.random_range(0..5), rng.random_range(0..5)]).collect();
            vox.sort();
            vox.dedup();
            let a = mask_from([10, 10, 10], &vox, 1);
            let moved: Vec<Coord> = vox.iter().map(|v| [v[0] + tz, v[1] + ty, v[2] + tx]).collect();
            let b = mask_from([10, 10, 10], &moved, 1);
            let ca = centroid(&a, 1).unwrap().coord;
            let cb = centroid(&b, 1).unwrap().coord;
            proptest::prop_assert_eq!(cb, [ca[0] + tz, ca[1] + ty, ca[2] + tx]);
        }
    }
}
