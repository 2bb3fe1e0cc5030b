//! Point prompts: heatmap encoding and training-time prompt simulation.

use ndarray::Array3;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::case::LongitudinalCase;
use crate::error::{Error, Result};
use crate::field::DeformationField;
use crate::volume::{centroid, clamp_to, InstanceMask, PromptPoint, PromptRole};

/// Heatmap values below this are stored as exact zeros.
pub const HEATMAP_FLUSH: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptHeatmap {
    pub data: Array3<f64>,
}

/// `exp(-|v - p|^2 / (2 sigma^2))` over `shape`, equal to 1 at `p`.
pub fn gaussian_heatmap(p: &PromptPoint, shape: [usize; 3], sigma: f64) -> Result<PromptHeatmap> {
    p.check_within(shape)?;
    let denom = 2.0 * sigma * sigma;
    let data = Array3::from_shape_fn(shape, |(z, y, x)| {
        let d2 = [z, y, x].iter().zip(p.coord).map(|(&a, b)| ((a as i64 - b) as f64).powi(2)).sum::<f64>();
        let v = (-d2 / denom).exp();
        if v < HEATMAP_FLUSH {
            0.0
        } else {
            v
        }
    });
    Ok(PromptHeatmap { data })
}

/// Sampling weight `1 / (d^2 + 1)` of every lesion voxel, `d` measured to the
/// lesion centroid. Voxels are listed in lexicographic order.
pub fn mask_prompt_weights(mask: &InstanceMask, lesion_id: u32) -> Result<Vec<([i64; 3], f64)>> {
    let c = centroid(mask, lesion_id)?.coord;
    Ok(mask
        .voxels(lesion_id)
        .into_iter()
        .map(|v| {
            let d2: f64 = (0..3).map(|i| ((v[i] - c[i]) as f64).powi(2)).sum();
            (v, 1.0 / (d2 + 1.0))
        })
        .collect())
}

/// A lesion voxel drawn with probability proportional to `1 / (d^2 + 1)`.
pub fn sample_mask_prompt<R: Rng + ?Sized>(mask: &InstanceMask, lesion_id: u32, rng: &mut R) -> Result<PromptPoint> {
    let weights = mask_prompt_weights(mask, lesion_id)?;
    let dist = WeightedIndex::new(weights.iter().map(|(_, w)| *w)).map_err(|_| Error::MissingLesion(lesion_id))?;
    let (coord, _) = weights[dist.sample(rng)];
    Ok(PromptPoint::new(coord, PromptRole::Verified, lesion_id))
}

/// `round(p + u(p) + noise)` clamped to the grid, with isotropic Gaussian noise.
pub fn propagate_with_jitter<R: Rng + ?Sized>(
    p0: &PromptPoint,
    field: &DeformationField,
    noise_sigma_vox: f64,
    rng: &mut R,
) -> Result<PromptPoint> {
    let shape = field.shape();
    p0.check_within(shape)?;
    let u = field.at(p0.coord.map(|c| c as usize));
    let mut target = [0.0f64; 3];
    for i in 0..3 {
        target[i] = p0.coord[i] as f64 + u[i];
    }
    if noise_sigma_vox > 0.0 {
        let normal = Normal::new(0.0, noise_sigma_vox).map_err(|e| Error::Config(e.to_string()))?;
        for t in target.iter_mut() {
            *t += normal.sample(rng);
        }
    }
    let rounded = target.map(|t| t.round() as i64);
    Ok(PromptPoint::new(clamp_to(rounded, shape), PromptRole::Proposed, p0.lesion_id))
}

/// Propagates the case's baseline prompt through its truth field and jitters it.
pub fn simulate_registered_prompt<R: Rng + ?Sized>(
    case: &LongitudinalCase,
    lesion_id: u32,
    noise_sigma_vox: f64,
    rng: &mut R,
) -> Result<PromptPoint> {
    let p0 = case.baseline_prompts.get(&lesion_id).ok_or(Error::MissingLesion(lesion_id))?;
    let field = case.truth_field.as_ref().ok_or_else(|| Error::MissingField(case.case_id.clone()))?;
    propagate_with_jitter(p0, field, noise_sigma_vox, rng)
}

/// The reader-confirmed follow-up click: a recorded click if the case has
/// one, else the follow-up lesion centroid. A lesion absent at follow-up
/// falls back to the baseline click carried through the truth field.
pub fn verified_followup_prompt(case: &LongitudinalCase, lesion_id: u32) -> Result<PromptPoint> {
    if let Some(p) = case.followup_prompts.get(&lesion_id) {
        return Ok(p.with_role(PromptRole::Verified));
    }
    if case.followup.mask.contains(lesion_id) {
        return centroid(&case.followup.mask, lesion_id);
    }
    let p0 = case.baseline_prompts.get(&lesion_id).ok_or(Error::MissingLesion(lesion_id))?;
    let moved = match &case.truth_field {
        Some(f) => {
            let u = f.at(p0.coord.map(|c| c as usize));
            clamp_to([0, 1, 2].map(|i| (p0.coord[i] as f64 + u[i]).round() as i64), case.shape())
        }
        None => p0.coord,
    };
    Ok(PromptPoint::new(moved, PromptRole::Verified, lesion_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptBranch {
    /// Drawn from the follow-up ground-truth mask.
    MaskSample,
    /// Propagated from the baseline click with registration-like jitter.
    Registered,
}

/// Training prompt for one sample.
///
/// `p0` is the baseline click used for this sample; the registered branch
/// propagates it through the case's truth field. A lesion that vanished at
/// follow-up can only use the registered branch.
pub fn choose_training_prompt_with<R: Rng + ?Sized>(
    case: &LongitudinalCase,
    p0: &PromptPoint,
    noise_sigma_vox: f64,
    branch: PromptBranch,
    rng: &mut R,
) -> Result<PromptPoint> {
    let present = case.followup.mask.contains(p0.lesion_id);
    match branch {
        PromptBranch::MaskSample if present => sample_mask_prompt(&case.followup.mask, p0.lesion_id, rng),
        _ => {
            let field = case.truth_field.as_ref().ok_or_else(|| Error::MissingField(case.case_id.clone()))?;
            propagate_with_jitter(p0, field, noise_sigma_vox, rng)
        }
    }
}

/// The per-sample 50/50 split between the two prompt sources.
pub fn choose_training_prompt<R: Rng + ?Sized>(
    case: &LongitudinalCase,
    p0: &PromptPoint,
    noise_sigma_vox: f64,
    rng: &mut R,
) -> Result<(PromptPoint, PromptBranch)> {
    let branch = if rng.random_bool(0.5) { PromptBranch::MaskSample } else { PromptBranch::Registered };
    Ok((choose_training_prompt_with(case, p0, noise_sigma_vox, branch, rng)?, branch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heatmap_analytic_values() {
        let p = PromptPoint::new([5, 5, 5], PromptRole::Verified, 1);
        let h = gaussian_heatmap(&p, [11, 11, 11], 1.0).unwrap();
        assert_eq!(h.data[[5, 5, 5]], 1.0);
        assert!((h.data[[5, 6, 5]] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((h.data[[5, 5, 8]] - (-4.5f64).exp()).abs() < 1e-12);
        assert_eq!(h.data[[0, 0, 0]], 0.0);
        assert!(h.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn heatmap_out_of_bounds() {
        let p = PromptPoint::new([5, 5, 11], PromptRole::Verified, 1);
        assert!(matches!(gaussian_heatmap(&p, [11, 11, 11], 1.0), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn heatmap_translation_equivariant() {
        let a = gaussian_heatmap(&PromptPoint::new([4, 5, 6], PromptRole::Verified, 1), [12, 12, 12], 1.0).unwrap();
        let b = gaussian_heatmap(&PromptPoint::new([6, 6, 7], PromptRole::Verified, 1), [12, 12, 12], 1.0).unwrap();
        for z in 0..10 {
            for y in 0..11 {
                for x in 0..11 {
                    assert_eq!(a.data[[z, y, x]], b.data[[z + 2, y + 1, x + 1]]);
                }
            }
        }
    }

    #[test]
    fn single_voxel_lesion_always_sampled() {
        let mut m = InstanceMask::zeros([6, 6, 6]);
        m.labels_mut()[[2, 3, 4]] = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_mask_prompt(&m, 5, &mut rng).unwrap().coord, [2, 3, 4]);
        }
        assert!(matches!(sample_mask_prompt(&m, 1, &mut rng), Err(Error::MissingLesion(1))));
    }

    #[test]
    fn sampling_is_reproducible() {
        let mut m = InstanceMask::zeros([8, 8, 8]);
        for x in 1..7 {
            m.labels_mut()[[4, 4, x]] = 1;
        }
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_mask_prompt(&m, 1, &mut rng).unwrap().coord).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
    }

    #[test]
    fn propagation_identity_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PromptPoint::new([10, 10, 10], PromptRole::Baseline, 1);
        let zero = DeformationField::zeros([20, 20, 20]);
        assert_eq!(propagate_with_jitter(&p, &zero, 0.0, &mut rng).unwrap().coord, [10, 10, 10]);
        let shift = DeformationField::constant([20, 20, 20], [2.0, -1.0, 0.0]);
        let q = propagate_with_jitter(&p, &shift, 0.0, &mut rng).unwrap();
        assert_eq!(q.coord, [12, 9, 10]);
        assert_eq!(q.role, PromptRole::Proposed);
    }

    #[test]
    fn jitter_std_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PromptPoint::new([50, 50, 50], PromptRole::Baseline, 1);
        let f = DeformationField::zeros([101, 101, 101]);
        let n = 10_000;
        let mut sums = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for _ in 0..n {
            let q = propagate_with_jitter(&p, &f, 3.0, &mut rng).unwrap();
            for i in 0..3 {
                let d = (q.coord[i] - 50) as f64;
                sums[i] += d;
                sq[i] += d * d;
            }
        }
        for i in 0..3 {
            let mean = sums[i] / n as f64;
            let std = (sq[i] / n as f64 - mean * mean).sqrt();
            assert!((std - 3.0).abs() < 0.15, "axis {i}: std {std}");
        }
    }

    #[test]
    fn line_lesion_frequencies_follow_inverse_square_weights() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut m = InstanceMask::zeros([9, 9, 9]);
        for x in 2..7 {
            m.labels_mut()[[4, 4, x]] = 1;
        }
        let w: Vec<f64> = [4.0, 1.0, 0.0, 1.0, 4.0].iter().map(|d2: &f64| 1.0 / (d2 + 1.0)).collect();
        let total: f64 = w.iter().sum();
        let n = 100_000;
        let mut counts = [0usize; 5];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..n {
            let p = sample_mask_prompt(&m, 1, &mut rng).unwrap();
            counts[(p.coord[2] - 2) as usize] += 1;
        }
        let stat: f64 = counts
            .iter()
            .zip(&w)
            .map(|(&c, wi)| {
                let e = n as f64 * wi / total;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        let p_value = 1.0 - ChiSquared::new(4.0).unwrap().cdf(stat);
        assert!(p_value > 0.01, "chi2 {stat}, p {p_value}");
    }

    #[test]
    fn branch_rate_is_even() {
        let case = crate::synth::make_standard_case(4, [24, 24, 24], 1).unwrap();
        let id = case.lesion_ids()[0];
        let p0 = case.baseline_prompts[&id];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let mask_draws = (0..n)
            .filter(|_| choose_training_prompt(&case, &p0, 2.0, &mut rng).unwrap().1 == PromptBranch::MaskSample)
            .count();
        let rate = mask_draws as f64 / n as f64;
        assert!((0.48..=0.52).contains(&rate), "{rate}");
    }

    #[test]
    fn large_jitter_leaves_the_lesion_sometimes() {
        let case = crate::synth::make_standard_case(4, [24, 24, 24], 1).unwrap();
        let id = case.lesion_ids()[0];
        let p0 = case.baseline_prompts[&id];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let outside = (0..500)
            .map(|_| choose_training_prompt_with(&case, &p0, 8.0, PromptBranch::Registered, &mut rng).unwrap())
            .filter(|p| case.followup.mask.labels()[p.coord.map(|c| c as usize)] != id)
            .count();
        assert!(outside > 0);
    }

    #[test]
    fn vanished_lesion_uses_registered_branch() {
        let mut case = crate::synth::make_standard_case(4, [24, 24, 24], 1).unwrap();
        let id = case.lesion_ids()[0];
        case.followup.mask = InstanceMask::zeros(case.shape());
        let p0 = case.baseline_prompts[&id];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = choose_training_prompt_with(&case, &p0, 0.0, PromptBranch::MaskSample, &mut rng).unwrap();
        assert_eq!(p.role, PromptRole::Proposed);
    }
}
