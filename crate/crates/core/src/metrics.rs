//! Overlap, surface and detection metrics with bootstrap aggregation.

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{intersection_count, InstanceMask};

pub const DEFAULT_NSD_TOLERANCE_MM: f64 = 2.0;
pub const DEFAULT_LDR_THRESHOLD: f64 = 0.1;
pub const DEFAULT_BOOTSTRAP: usize = 1000;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn same_shape(a: &Array3<bool>, b: &Array3<bool>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `2|P & G| / (|P| + |G|)`, 1 when both are empty.
pub fn dsc(pred: &Array3<bool>, gt: &Array3<bool>) -> Result<f64> {
    same_shape(pred, gt)?;
    let p = pred.iter().filter(|&&v| v).count();
    let g = gt.iter().filter(|&&v| v).count();
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * intersection_count(pred, gt) as f64 / (p + g) as f64)
}

/// Mask voxels with at least one 6-neighbour outside the mask or the grid.
pub fn border_voxels(mask: &Array3<bool>) -> Array3<bool> {
    let (d, h, w) = mask.dim();
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        if !mask[[z, y, x]] {
            return false;
        }
        let p = [z, y, x];
        let s = [d, h, w];
        (0..3).any(|a| {
            let mut lo = p;
            let mut hi = p;
            if p[a] == 0 || p[a] + 1 == s[a] {
                return true;
            }
            lo[a] -= 1;
            hi[a] += 1;
            !mask[lo] || !mask[hi]
        })
    })
}

/// One pass of the lower-envelope squared distance transform along a line
/// with sample spacing `s`.
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * s;
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let r = v[k];
            let x = ((f[q] + pos(q) * pos(q)) - (f[r] + pos(r) * pos(r))) / (2.0 * (pos(q) - pos(r)));
            if x <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = x;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (in mm) from every voxel to the nearest
/// `true` site; infinite everywhere if there are no sites.
pub fn squared_distance_transform(sites: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut dist = sites.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    for axis in 0..3 {
        let n = dist.len_of(Axis(axis));
        let mut f = vec![0.0; n];
        let mut out = vec![0.0; n];
        let mut v = vec![0usize; n];
        let mut z = vec![0.0; n + 1];
        for mut lane in dist.lanes_mut(Axis(axis)) {
            for (a, b) in f.iter_mut().zip(lane.iter()) {
                *a = *b;
            }
            edt_line(&f, spacing[axis], &mut out, &mut v, &mut z);
            for (a, b) in lane.iter_mut().zip(&out) {
                *a = *b;
            }
        }
    }
    dist
}

fn within(d2: f64, tol: f64) -> bool {
    d2 <= tol * tol * (1.0 + 1e-12) + 1e-12
}

/// Normalized surface distance at tolerance `tolerance_mm`.
pub fn nsd(pred: &Array3<bool>, gt: &Array3<bool>, tolerance_mm: f64, spacing: [f64; 3]) -> Result<f64> {
    same_shape(pred, gt)?;
    if !(tolerance_mm > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tolerance_mm}")));
    }
    let bp = border_voxels(pred);
    let bg = border_voxels(gt);
    let np = bp.iter().filter(|&&v| v).count();
    let ng = bg.iter().filter(|&&v| v).count();
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let to_g = squared_distance_transform(&bg, spacing);
    let to_p = squared_distance_transform(&bp, spacing);
    let hits_p = bp.iter().zip(to_g.iter()).filter(|(&b, &d)| b && within(d, tolerance_mm)).count();
    let hits_g = bg.iter().zip(to_p.iter()).filter(|(&b, &d)| b && within(d, tolerance_mm)).count();
    Ok((hits_p + hits_g) as f64 / (np + ng) as f64)
}

/// Per-lesion detection: DSC at or above `threshold`, or an empty prediction
/// for a lesion that is absent from the ground truth.
pub fn lesion_detected(pred: &Array3<bool>, gt: &Array3<bool>, threshold: f64) -> Result<bool> {
    same_shape(pred, gt)?;
    if !gt.iter().any(|&v| v) {
        return Ok(!pred.iter().any(|&v| v));
    }
    Ok(dsc(pred, gt)? >= threshold)
}

/// Fraction of ground-truth lesions detected by their aligned prediction.
pub fn ldr(predictions: &[Array3<bool>], gt_instances: &[(&InstanceMask, u32)], dsc_threshold: f64) -> Result<f64> {
    if predictions.len() != gt_instances.len() {
        return Err(Error::Alignment { predictions: predictions.len(), lesions: gt_instances.len() });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut hits = 0usize;
    for (p, (mask, id)) in predictions.iter().zip(gt_instances) {
        if lesion_detected(p, &mask.binary(*id), dsc_threshold)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}

/// Mean and standard deviation of `n_resamples` bootstrap resample means.
pub fn bootstrap(values: &[f64], n_resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if n_resamples == 0 {
        return Err(Error::Config("n_resamples must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let means: Vec<f64> = (0..n_resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let mean = means.iter().sum::<f64>() / n_resamples as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n_resamples as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub case_id: String,
    pub lesion_id: u32,
    pub dsc: f64,
    pub nsd: f64,
    pub detected: bool,
}

/// Scores one lesion prediction against its follow-up ground truth.
pub fn score_lesion(
    case_id: &str,
    lesion_id: u32,
    pred: &Array3<bool>,
    gt: &Array3<bool>,
    spacing: [f64; 3],
    tolerance_mm: f64,
    ldr_threshold: f64,
) -> Result<LesionRecord> {
    Ok(LesionRecord {
        case_id: case_id.to_string(),
        lesion_id,
        dsc: dsc(pred, gt)?,
        nsd: nsd(pred, gt, tolerance_mm, spacing)?,
        detected: lesion_detected(pred, gt, ldr_threshold)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub nsd_mean: f64,
    pub nsd_std: f64,
    pub ldr: f64,
    pub ldr_std: f64,
    pub nsd_tolerance_mm: f64,
    pub ldr_dsc_threshold: f64,
    /// Bootstrap resampling unit.
    pub aggregation: String,
    pub per_lesion: Vec<LesionRecord>,
    pub n_bootstrap: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub fn from_records(records: Vec<LesionRecord>, tolerance_mm: f64, ldr_threshold: f64, n_bootstrap: usize, seed: u64) -> Result<Self> {
        let d: Vec<f64> = records.iter().map(|r| r.dsc).collect();
        let s: Vec<f64> = records.iter().map(|r| r.nsd).collect();
        let l: Vec<f64> = records.iter().map(|r| if r.detected { 1.0 } else { 0.0 }).collect();
        let (dsc_mean, dsc_std) = bootstrap(&d, n_bootstrap, seed)?;
        let (nsd_mean, nsd_std) = bootstrap(&s, n_bootstrap, seed)?;
        let (ldr, ldr_std) = bootstrap(&l, n_bootstrap, seed)?;
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            dsc_mean,
            dsc_std,
            nsd_mean,
            nsd_std,
            ldr,
            ldr_std,
            nsd_tolerance_mm: tolerance_mm,
            ldr_dsc_threshold: ldr_threshold,
            aggregation: "lesion".into(),
            per_lesion: records,
            n_bootstrap,
            seed,
        })
    }

    /// Plain per-lesion mean DSC without resampling.
    pub fn raw_dsc_mean(&self) -> f64 {
        self.per_lesion.iter().map(|r| r.dsc).sum::<f64>() / self.per_lesion.len().max(1) as f64
    }

    /// `DSC  NSD  LDR` as percentages with one decimal.
    pub fn percent_row(&self) -> String {
        format!(
            "{:5.1} ±{:4.1}  {:5.1} ±{:4.1}  {:5.1}",
            100.0 * self.dsc_mean,
            100.0 * self.dsc_std,
            100.0 * self.nsd_mean,
            100.0 * self.nsd_std,
            100.0 * self.ldr
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(shape: usize, lo: [usize; 3], size: usize) -> Array3<bool> {
        Array3::from_shape_fn((shape, shape, shape), |(z, y, x)| {
            [z, y, x].iter().zip(lo).all(|(&c, l)| c >= l && c < l + size)
        })
    }

    #[test]
    fn dsc_examples() {
        let a = cube(6, [1, 1, 1], 2);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &cube(6, [4, 4, 4], 2)).unwrap(), 0.0);
        assert_eq!(dsc(&a, &cube(6, [2, 1, 1], 2)).unwrap(), 0.5);
        let e = Array3::from_elem((6, 6, 6), false);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert!(matches!(dsc(&a, &cube(5, [1, 1, 1], 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn nsd_examples() {
        let a = cube(10, [3, 3, 3], 3);
        assert_eq!(nsd(&a, &a, 2.0, [1.0; 3]).unwrap(), 1.0);
        let far = cube(10, [3, 3, 3], 1);
        let far2 = cube(10, [8, 8, 8], 1);
        assert_eq!(nsd(&far, &far2, 1.0, [1.0; 3]).unwrap(), 0.0);
        // Dilation with the 6-connected structuring element.
        let dil = Array3::from_shape_fn((10, 10, 10), |(z, y, x)| {
            let outside = [z, y, x].iter().filter(|&&c| !(3..6).contains(&c)).count();
            let near = [z, y, x].iter().all(|&c| (2..7).contains(&c));
            near && outside <= 1
        });
        assert_eq!(nsd(&a, &dil, 1.5, [1.0; 3]).unwrap(), 1.0);
        let e = Array3::from_elem((10, 10, 10), false);
        assert_eq!(nsd(&e, &e, 1.0, [1.0; 3]).unwrap(), 1.0);
        assert_eq!(nsd(&a, &e, 1.0, [1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn edt_with_anisotropic_spacing() {
        let mut s = Array3::from_elem((5, 5, 5), false);
        s[[2, 2, 2]] = true;
        let d = squared_distance_transform(&s, [2.0, 1.0, 0.5]);
        assert_eq!(d[[0, 2, 2]], 16.0);
        assert_eq!(d[[2, 0, 2]], 4.0);
        assert_eq!(d[[2, 2, 0]], 1.0);
        assert_eq!(d[[3, 3, 3]], 4.0 + 1.0 + 0.25);
    }

    #[test]
    fn ldr_examples() {
        let mut m = InstanceMask::zeros([8, 8, 8]);
        m.labels_mut()[[1, 1, 1]] = 1;
        m.labels_mut()[[4, 4, 4]] = 2;
        m.labels_mut()[[6, 6, 6]] = 3;
        let gts = [(&m, 1), (&m, 2), (&m, 3)];
        let perfect: Vec<_> = [1, 2, 3].iter().map(|&i| m.binary(i)).collect();
        assert_eq!(ldr(&perfect, &gts, 0.1).unwrap(), 1.0);
        let empty = vec![Array3::from_elem((8, 8, 8), false); 3];
        assert_eq!(ldr(&empty, &gts, 0.1).unwrap(), 0.0);
        let two = vec![m.binary(1), m.binary(2), Array3::from_elem((8, 8, 8), false)];
        assert!((ldr(&two, &gts, 0.1).unwrap() - 2.0 / 3.0).abs() < 1e-9);
        assert!(matches!(ldr(&two[..2], &gts, 0.1), Err(Error::Alignment { .. })));
        // Lesion 9 is absent: an empty prediction counts as detected.
        assert_eq!(ldr(&empty[..1], &[(&m, 9)], 0.1).unwrap(), 1.0);
    }

    #[test]
    fn bootstrap_basics() {
        let (m, sd) = bootstrap(&[0.7; 10], 100, 1).unwrap();
        assert!((m - 0.7).abs() < 1e-12 && sd < 1e-12);
        let v = [0.1, 0.5, 0.9, 0.3];
        assert_eq!(bootstrap(&v, 1000, 4).unwrap(), bootstrap(&v, 1000, 4).unwrap());
        assert!(matches!(bootstrap(&[], 10, 0), Err(Error::EmptyInput)));
    }

    #[test]
    fn report_rows() {
        let recs = vec![
            LesionRecord { case_id: "a".into(), lesion_id: 1, dsc: 1.0, nsd: 1.0, detected: true },
            LesionRecord { case_id: "a".into(), lesion_id: 2, dsc: 1.0, nsd: 1.0, detected: true },
        ];
        let r = MetricsReport::from_records(recs, 2.0, 0.1, 50, 0).unwrap();
        assert_eq!(r.dsc_mean, 1.0);
        assert_eq!(r.percent_row().split_whitespace().next(), Some("100.0"));
    }
}
