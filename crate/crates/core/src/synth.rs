//! Phantom longitudinal cases with known deformation fields.
//!
//! Follow-ups are produced by a radial, Gaussian-enveloped displacement around
//! each lesion (outward to grow, inward to shrink, a near-total collapse to
//! vanish, two sinks to split) plus a small global affine jitter. The
//! follow-up mask is defined as the warp of the baseline mask, so
//! correspondence ground truth is exact.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::case::{CaseKind, LongitudinalCase, Timepoint};
use crate::error::{Error, Result};
use crate::field::{gaussian_smooth, warp_pair, DeformationField};
use crate::volume::{centroid, Coord, InstanceMask, PromptPoint, PromptRole, Volume};

const PHANTOM_NOISE: f64 = 0.01;
const PLACEMENT_RETRIES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthMode {
    Grow,
    Shrink,
    Stable,
    Vanish,
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthParams {
    pub mode: GrowthMode,
    /// Scales the radial displacement, in `[0, 1]`.
    pub magnitude: f64,
    /// Standard deviation of additive follow-up intensity noise.
    pub noise_sigma: f64,
    /// Gaussian smoothing (voxels) applied to this lesion's displacement.
    pub field_smoothness: f64,
}

impl GrowthParams {
    pub fn stable() -> Self {
        Self { mode: GrowthMode::Stable, magnitude: 0.0, noise_sigma: 0.0, field_smoothness: 1.0 }
    }

    pub fn new(mode: GrowthMode, magnitude: f64) -> Self {
        Self { mode, magnitude, noise_sigma: 0.0, field_smoothness: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.magnitude) {
            return Err(Error::Config(format!("magnitude {} outside [0, 1]", self.magnitude)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if !(self.field_smoothness > 0.0) {
            return Err(Error::Config("field_smoothness must be positive".into()));
        }
        Ok(())
    }
}

/// Acquisition-level settings for [`synthesize_followup`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FollowupOptions {
    pub seed: u64,
    /// Maximum translation (voxels) of the global affine jitter; its linear
    /// part scales with the same value.
    pub jitter_vox: f64,
}

impl FollowupOptions {
    pub fn new(seed: u64) -> Self {
        Self { seed, jitter_vox: 0.5 }
    }
}

#[derive(Debug, Clone)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }

    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2)).sum()
    }

    fn max_radius(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }
}

fn smooth_background(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Array3<f64> {
    let phase: [f64; 3] = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
    let freq: [f64; 3] = [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)];
    let mut bg = Array3::from_shape_fn(shape, |(z, y, x)| {
        let p = [z as f64 / shape[0] as f64, y as f64 / shape[1] as f64, x as f64 / shape[2] as f64];
        let wave: f64 = (0..3).map(|i| (std::f64::consts::TAU * freq[i] * p[i] + phase[i]).sin()).sum::<f64>() / 3.0;
        0.1 + 0.04 * wave
    });
    let min_extent = *shape.iter().min().unwrap() as f64;
    let n_organs = rng.random_range(2..=3);
    for _ in 0..n_organs {
        let organ = Ellipsoid {
            center: [0, 1, 2].map(|i| rng.random_range(0.3..0.7) * shape[i] as f64),
            radii: [0, 1, 2].map(|_| rng.random_range(0.18..0.3) * min_extent),
        };
        let level = rng.random_range(0.3..0.45);
        for ((z, y, x), v) in bg.indexed_iter_mut() {
            // Soft edge: a logistic ramp on the normalised ellipsoid level.
            let t = organ.level([z as f64, y as f64, x as f64]);
            let w = 1.0 / (1.0 + ((t - 1.0) * 6.0).exp());
            *v = *v * (1.0 - w) + level * w;
        }
    }
    bg
}

fn add_noise(rng: &mut ChaCha8Rng, a: &mut Array3<f64>, sigma: f64) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        a.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
}

fn to_volume(a: Array3<f64>) -> Result<Volume> {
    Volume::new(a.mapv(|v| v as f32), [1.0; 3])
}

/// Lesion radii used by the generators, scaled to the smallest extent.
fn lesion_radius_range(shape: [usize; 3]) -> (f64, f64) {
    let m = *shape.iter().min().unwrap() as f64;
    ((0.08 * m).max(2.0), (0.12 * m).max(2.5))
}

/// A smooth phantom with organ-like blobs and `n_lesions` ellipsoidal lesions
/// labelled `1..=n_lesions`, pairwise separated by at least two background voxels.
pub fn generate_phantom(seed: u64, shape: [usize; 3], n_lesions: usize) -> Result<(Volume, InstanceMask)> {
    if shape.contains(&0) {
        return Err(Error::Generation(format!("invalid shape {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = smooth_background(&mut rng, shape);
    let (rmin, rmax) = lesion_radius_range(shape);
    let mut lesions: Vec<Ellipsoid> = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let radii = [0, 1, 2].map(|_| rng.random_range(rmin..rmax));
            let r = radii.iter().copied().fold(0.0, f64::max);
            // Leave room for growth inside the volume.
            let margin = r + 3.0;
            if (0..3).any(|i| shape[i] as f64 <= 2.0 * margin) {
                break;
            }
            let center = [0, 1, 2].map(|i| rng.random_range(margin..shape[i] as f64 - margin).round());
            let candidate = Ellipsoid { center, radii };
            let clear = lesions.iter().all(|o| {
                let d: f64 = (0..3).map(|i| (o.center[i] - center[i]).powi(2)).sum::<f64>().sqrt();
                d >= o.max_radius() + r + 3.0
            });
            if clear {
                lesions.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place lesion {} of {n_lesions} in {shape:?}",
                lesions.len() + 1
            )));
        }
    }
    let mut labels = Array3::<u32>::zeros(shape);
    for (i, lesion) in lesions.iter().enumerate() {
        let level = rng.random_range(0.75..0.95);
        for ((z, y, x), l) in labels.indexed_iter_mut() {
            if lesion.contains([z as f64, y as f64, x as f64]) {
                *l = i as u32 + 1;
                image[[z, y, x]] = level;
            }
        }
    }
    add_noise(&mut rng, &mut image, PHANTOM_NOISE);
    Ok((to_volume(image)?, InstanceMask::new(labels)))
}

struct LesionGeometry {
    center: [f64; 3],
    radius: f64,
    axis: usize,
}

fn lesion_geometry(mask: &InstanceMask, id: u32) -> Result<LesionGeometry> {
    let vox = mask.voxels(id);
    if vox.is_empty() {
        return Err(Error::MissingLesion(id));
    }
    let n = vox.len() as f64;
    let center = [0, 1, 2].map(|i| vox.iter().map(|v| v[i] as f64).sum::<f64>() / n);
    let mut spread = [0.0f64; 3];
    let mut radius = 0.0f64;
    for v in &vox {
        let d: [f64; 3] = [0, 1, 2].map(|i| v[i] as f64 - center[i]);
        for i in 0..3 {
            spread[i] += d[i] * d[i];
        }
        radius = radius.max(d.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    let axis = (0..3).max_by(|&a, &b| spread[a].total_cmp(&spread[b])).unwrap();
    Ok(LesionGeometry { center, radius: radius.max(0.5) + 0.5, axis })
}

/// Adds `a * (x - c) * exp(-|x - c|^2 / (2 s^2))` to the field components.
fn add_radial(comps: &mut [Array3<f64>; 3], c: [f64; 3], a: f64, s: f64) {
    for k in 0..3 {
        for ((z, y, x), v) in comps[k].indexed_iter_mut() {
            let d = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
            let r2: f64 = d.iter().map(|x| x * x).sum();
            *v += a * d[k] * (-r2 / (2.0 * s * s)).exp();
        }
    }
}

fn lesion_field(shape: [usize; 3], g: &LesionGeometry, p: &GrowthParams) -> [Array3<f64>; 3] {
    let mut comps = [0, 1, 2].map(|_| Array3::<f64>::zeros(shape));
    match p.mode {
        GrowthMode::Stable => {}
        GrowthMode::Grow => add_radial(&mut comps, g.center, 0.9 * p.magnitude, 1.5 * g.radius),
        GrowthMode::Shrink => add_radial(&mut comps, g.center, -0.9 * p.magnitude, 1.5 * g.radius),
        // A wide, near-total contraction that takes the lesion below one voxel.
        GrowthMode::Vanish => add_radial(&mut comps, g.center, -0.95, 3.0 * g.radius),
        GrowthMode::Split => {
            let offset = 0.5 * g.radius;
            for sign in [-1.0, 1.0] {
                let mut c = g.center;
                c[g.axis] += sign * offset;
                add_radial(&mut comps, c, -0.7 * p.magnitude, 0.75 * g.radius);
            }
        }
    }
    if p.mode != GrowthMode::Stable {
        for c in comps.iter_mut() {
            *c = gaussian_smooth(c, p.field_smoothness);
        }
    }
    comps
}

fn affine_jitter(rng: &mut ChaCha8Rng, shape: [usize; 3], jitter: f64) -> [Array3<f64>; 3] {
    let mut comps = [0, 1, 2].map(|_| Array3::<f64>::zeros(shape));
    if jitter <= 0.0 {
        return comps;
    }
    let t: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-jitter..=jitter));
    let lin_scale = 0.01 * jitter.min(1.0);
    let lin: [[f64; 3]; 3] = [0, 1, 2].map(|_| [0, 1, 2].map(|_| rng.random_range(-lin_scale..=lin_scale)));
    let mid = shape.map(|s| (s as f64 - 1.0) / 2.0);
    for k in 0..3 {
        for ((z, y, x), v) in comps[k].indexed_iter_mut() {
            let d = [z as f64 - mid[0], y as f64 - mid[1], x as f64 - mid[2]];
            *v = t[k] + (0..3).map(|j| lin[k][j] * d[j]).sum::<f64>();
        }
    }
    comps
}

/// Mean intensity in a shell just outside a lesion, for inpainting vanished lesions.
fn shell_mean(volume: &Volume, mask: &InstanceMask, g: &LesionGeometry) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for ((z, y, x), &l) in mask.labels().indexed_iter() {
        let d: f64 = [z, y, x].iter().zip(g.center).map(|(&p, c)| (p as f64 - c).powi(2)).sum::<f64>().sqrt();
        if l == 0 && d > g.radius && d <= g.radius + 3.0 {
            sum += volume.data()[[z, y, x]] as f64;
            n += 1;
        }
    }
    if n == 0 {
        volume.min() as f64
    } else {
        sum / n as f64
    }
}

/// Synthesizes a follow-up scan from a baseline, returning the exact field used.
///
/// Lesions without an entry in `params` stay stable.
pub fn synthesize_followup(
    volume: &Volume,
    mask: &InstanceMask,
    params: &BTreeMap<u32, GrowthParams>,
    opts: &FollowupOptions,
) -> Result<(Volume, InstanceMask, DeformationField)> {
    mask.check_shape(volume)?;
    let shape = volume.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut comps = affine_jitter(&mut rng, shape, opts.jitter_vox);
    let mut noise = 0.0f64;
    let mut vanished = Vec::new();
    for (&id, p) in params {
        p.validate()?;
        let g = lesion_geometry(mask, id)?;
        let lc = lesion_field(shape, &g, p);
        for k in 0..3 {
            comps[k] += &lc[k];
        }
        noise = noise.max(p.noise_sigma);
        if p.mode == GrowthMode::Vanish {
            vanished.push((id, g));
        }
    }
    let field = DeformationField::from_components(comps);
    let min_jac = field.min_jacobian();
    if !(min_jac > 0.0) {
        return Err(Error::Generation(format!("deformation folds (min Jacobian {min_jac:.4}); lower the magnitude")));
    }
    let (warped, followup_mask) = warp_pair(volume, mask, &field)?;
    for (id, _) in &vanished {
        if followup_mask.contains(*id) {
            return Err(Error::Generation(format!("lesion {id} did not collapse")));
        }
    }

    let mut image = warped.data().mapv(|v| v as f64);
    if !vanished.is_empty() {
        // Voxels that pulled their value from a vanished lesion get the local background.
        let inv = field.inverse_positions();
        let fills: Vec<(u32, f64)> = vanished.iter().map(|(id, g)| (*id, shell_mean(volume, mask, g))).collect();
        for ((z, y, x), v) in image.indexed_iter_mut() {
            let q: Coord = [0, 1, 2].map(|k| inv[[z, y, x, k]].round() as i64);
            if let Some(&l) = crate::volume::in_bounds(q, shape)
                .then(|| &mask.labels()[[q[0] as usize, q[1] as usize, q[2] as usize]])
            {
                if let Some((_, fill)) = fills.iter().find(|(id, _)| *id == l) {
                    *v = *fill;
                }
            }
        }
    }
    add_noise(&mut rng, &mut image, noise);
    let followup = Volume::with_origin(image.mapv(|v| v as f32), volume.spacing(), volume.origin())?;
    Ok((followup, followup_mask, field))
}

/// Intensity levels of the ambiguity design.
const AMB_TARGET_BASELINE: f64 = 1.0;
const AMB_CONFOUNDER: f64 = 0.55;

/// A case where the follow-up target abuts an identical-looking confounder.
///
/// Target and confounder are mirror-image halves of two overlapping balls
/// split by the plane between them, so they match in size and follow-up
/// intensity. At baseline the target is brighter. The recorded prompts sit on
/// the target's face of the shared boundary.
pub fn make_ambiguity_case(seed: u64, shape: [usize; 3]) -> Result<LongitudinalCase> {
    make_ambiguity_case_with_confounder(seed, shape).map(|(case, _)| case)
}

/// [`make_ambiguity_case`] plus the confounder's voxel set.
pub fn make_ambiguity_case_with_confounder(seed: u64, shape: [usize; 3]) -> Result<(LongitudinalCase, Array3<bool>)> {
    let (background, _) = generate_phantom(seed, shape, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_D00D_F00D);
    let (_, rmax) = lesion_radius_range(shape);
    let r = rmax.max(2.5);
    let half_gap = (0.75 * r).floor().max(1.0) as i64;
    // Distance between ball centers; the split plane lies halfway.
    let sep = 2 * half_gap + 1;
    let axis = rng.random_range(0..3usize);
    let sign: i64 = if rng.random_bool(0.5) { 1 } else { -1 };
    let reach = (r.ceil() as i64) + 1;
    let mut center: Coord = [0; 3];
    for i in 0..3 {
        let n = shape[i] as i64;
        let (lo, hi) = if i == axis {
            // Both balls must fit along the split axis.
            if sign > 0 {
                (reach, n - 1 - reach - sep)
            } else {
                (reach + sep, n - 1 - reach)
            }
        } else {
            (reach, n - 1 - reach)
        };
        if lo > hi {
            return Err(Error::Generation(format!("shape {shape:?} too small for the ambiguity design")));
        }
        let mid = (lo + hi) / 2;
        let wiggle = ((hi - lo) / 4).max(0);
        center[i] = mid + rng.random_range(-wiggle..=wiggle);
    }
    let mut other = center;
    other[axis] += sign * sep;

    let mut labels = Array3::<u32>::zeros(shape);
    let mut confounder = Array3::<bool>::from_elem(shape, false);
    for ((z, y, x), l) in labels.indexed_iter_mut() {
        let v = [z as i64, y as i64, x as i64];
        let s = sign * (v[axis] - center[axis]);
        let dist = |c: &Coord| (0..3).map(|i| ((v[i] - c[i]) as f64).powi(2)).sum::<f64>().sqrt();
        if s <= half_gap && dist(&center) <= r {
            *l = 1;
        } else if s > half_gap && dist(&other) <= r {
            confounder[[z, y, x]] = true;
        }
    }
    let paint = |rng: &mut ChaCha8Rng, target_level: f64| -> Result<Volume> {
        let mut img = background.data().mapv(|v| v as f64);
        for ((z, y, x), v) in img.indexed_iter_mut() {
            if labels[[z, y, x]] == 1 {
                *v = target_level;
            } else if confounder[[z, y, x]] {
                *v = AMB_CONFOUNDER;
            }
        }
        add_noise(rng, &mut img, PHANTOM_NOISE);
        to_volume(img)
    };
    let baseline = paint(&mut rng, AMB_TARGET_BASELINE)?;
    let followup = paint(&mut rng, AMB_CONFOUNDER)?;
    let mask = InstanceMask::new(labels);

    let mut click = center;
    click[axis] += sign * half_gap;
    let case = LongitudinalCase {
        case_id: format!("amb_{seed}"),
        kind: CaseKind::Ambiguity,
        baseline: Timepoint::new(baseline, mask.clone())?,
        followup: Timepoint::new(followup, mask)?,
        truth_field: Some(DeformationField::zeros(shape)),
        baseline_prompts: BTreeMap::from([(1, PromptPoint::new(click, PromptRole::Baseline, 1))]),
        followup_prompts: BTreeMap::from([(1, PromptPoint::new(click, PromptRole::Verified, 1))]),
    };
    case.validate()?;
    Ok((case, confounder))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetSpec {
    pub n_cases: usize,
    pub shape: [usize; 3],
    pub seed: u64,
    /// Fraction of cases built with [`make_ambiguity_case`].
    pub ambiguity_fraction: f64,
    pub max_lesions: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { n_cases: 200, shape: [32, 32, 32], seed: 0, ambiguity_fraction: 0.3, max_lesions: 3 }
    }
}

fn random_params(rng: &mut ChaCha8Rng) -> GrowthParams {
    let mode = match rng.random_range(0..100) {
        0..30 => GrowthMode::Grow,
        30..60 => GrowthMode::Shrink,
        60..80 => GrowthMode::Stable,
        80..90 => GrowthMode::Vanish,
        _ => GrowthMode::Split,
    };
    GrowthParams {
        mode,
        magnitude: rng.random_range(0.3..0.8),
        noise_sigma: 0.02,
        field_smoothness: rng.random_range(0.5..1.5),
    }
}

/// One standard case; fold failures are retried at halved magnitude, and
/// vanishing lesions become shrinking ones from the second retry on.
pub fn make_standard_case(seed: u64, shape: [usize; 3], max_lesions: usize) -> Result<LongitudinalCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n = rng.random_range(1..=max_lesions.max(1));
    let (volume, mask) = generate_phantom(seed, shape, n)?;
    let mut params: BTreeMap<u32, GrowthParams> = (1..=n as u32).map(|id| (id, random_params(&mut rng))).collect();
    let opts = FollowupOptions::new(seed.wrapping_add(1));
    let mut attempt = 0;
    let (fv, fm, field) = loop {
        match synthesize_followup(&volume, &mask, &params, &opts) {
            Ok(out) => break out,
            Err(Error::Generation(msg)) if attempt < 4 => {
                log::debug!("case seed {seed}: {msg}; retrying");
                attempt += 1;
                for p in params.values_mut() {
                    p.magnitude *= 0.5;
                    // Vanish ignores magnitude; overlapping collapses can only be resolved by demotion.
                    if attempt >= 2 && p.mode == GrowthMode::Vanish {
                        p.mode = GrowthMode::Shrink;
                    }
                }
            }
            Err(e) => return Err(e),
        }
    };
    let baseline_prompts = (1..=n as u32)
        .map(|id| centroid(&mask, id).map(|p| (id, p.with_role(PromptRole::Baseline))))
        .collect::<Result<_>>()?;
    let case = LongitudinalCase {
        case_id: format!("case_{seed}"),
        kind: CaseKind::Standard,
        baseline: Timepoint::new(volume, mask)?,
        followup: Timepoint::new(fv, fm)?,
        truth_field: Some(field),
        baseline_prompts,
        followup_prompts: BTreeMap::new(),
    };
    Ok(case)
}

/// Whether case `i` of `n` is an ambiguity case; spreads `k` such cases evenly.
fn is_ambiguity(i: usize, n: usize, k: usize) -> bool {
    n > 0 && ((i + 1) * k) / n > (i * k) / n
}

/// Generates a dataset; case `i` uses seed `spec.seed + i`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<LongitudinalCase>> {
    let k = (spec.ambiguity_fraction * spec.n_cases as f64).round() as usize;
    (0..spec.n_cases)
        .map(|i| {
            let seed = spec.seed + i as u64;
            let mut case = if is_ambiguity(i, spec.n_cases, k) {
                make_ambiguity_case(seed, spec.shape)?
            } else {
                make_standard_case(seed, spec.shape, spec.max_lesions)?
            };
            case.case_id = format!("case_{i:04}");
            Ok(case)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::warp_labels;

    #[test]
    fn empty_phantom() {
        let (_, m) = generate_phantom(0, [64, 64, 64], 0).unwrap();
        assert!(m.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn phantom_is_deterministic() {
        let a = generate_phantom(5, [24, 24, 24], 2).unwrap();
        let b = generate_phantom(5, [24, 24, 24], 2).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(6, [24, 24, 24], 2).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn placement_failure_is_reported() {
        assert!(matches!(generate_phantom(0, [12, 12, 12], 20), Err(Error::Generation(_))));
    }

    #[test]
    fn identity_followup() {
        let (v, m) = generate_phantom(2, [24, 24, 24], 2).unwrap();
        let params = BTreeMap::from([(1, GrowthParams::stable()), (2, GrowthParams::stable())]);
        let opts = FollowupOptions { seed: 3, jitter_vox: 0.0 };
        let (fv, fm, f) = synthesize_followup(&v, &m, &params, &opts).unwrap();
        assert_eq!(fv, v);
        assert_eq!(fm, m);
        assert!(f.disp().iter().all(|&d| d == 0.0));
    }

    fn counts_after(mode: GrowthMode, magnitude: f64) -> (usize, usize) {
        let (v, m) = generate_phantom(11, [32, 32, 32], 1).unwrap();
        let params = BTreeMap::from([(1, GrowthParams::new(mode, magnitude))]);
        let (_, fm, f) = synthesize_followup(&v, &m, &params, &FollowupOptions::new(1)).unwrap();
        assert_eq!(warp_labels(&m, &f).unwrap(), fm);
        (m.count(1), fm.count(1))
    }

    #[test]
    fn grow_shrink_vanish_counts() {
        let (before, after) = counts_after(GrowthMode::Grow, 0.5);
        assert!(after > before, "{before} -> {after}");
        let (before, after) = counts_after(GrowthMode::Shrink, 0.5);
        assert!(after < before, "{before} -> {after}");
        let (_, after) = counts_after(GrowthMode::Vanish, 0.5);
        assert_eq!(after, 0);
    }

    #[test]
    fn split_stays_fold_free() {
        let (v, m) = generate_phantom(4, [32, 32, 32], 1).unwrap();
        let params = BTreeMap::from([(1, GrowthParams::new(GrowthMode::Split, 1.0))]);
        let (_, fm, f) = synthesize_followup(&v, &m, &params, &FollowupOptions::new(9)).unwrap();
        assert!(f.min_jacobian() > 0.0);
        assert!(fm.count(1) > 0);
    }

    #[test]
    fn rejects_unknown_lesion_and_bad_params() {
        let (v, m) = generate_phantom(4, [24, 24, 24], 1).unwrap();
        let params = BTreeMap::from([(9, GrowthParams::stable())]);
        assert!(matches!(synthesize_followup(&v, &m, &params, &FollowupOptions::new(0)), Err(Error::MissingLesion(9))));
        let params = BTreeMap::from([(1, GrowthParams::new(GrowthMode::Grow, 1.5))]);
        assert!(synthesize_followup(&v, &m, &params, &FollowupOptions::new(0)).is_err());
    }

    #[test]
    fn ambiguity_intensity_contract() {
        for seed in 0..5 {
            let (case, conf) = make_ambiguity_case_with_confounder(seed, [32, 32, 32]).unwrap();
            let target = case.followup.mask.binary(1);
            assert!(conf.iter().any(|&c| c));
            assert!(!conf.iter().zip(target.iter()).any(|(&c, &t)| c && t));
            let mean = |v: &Volume, sel: &Array3<bool>| {
                let (s, n) = v.data().iter().zip(sel.iter()).filter(|(_, &m)| m).fold((0.0, 0), |(s, n), (&x, _)| (s + x as f64, n + 1));
                s / n as f64
            };
            let range = |v: &Volume| (v.max() - v.min()) as f64;
            let fu = &case.followup.volume;
            let bl = &case.baseline.volume;
            assert!((mean(fu, &target) - mean(fu, &conf)).abs() < 0.01 * range(fu));
            assert!((mean(bl, &target) - mean(bl, &conf)).abs() > 0.3 * range(bl));
            assert_eq!(conf.iter().filter(|&&c| c).count(), target.iter().filter(|&&t| t).count());
        }
    }

    #[test]
    fn dataset_mixes_kinds() {
        let spec = DatasetSpec { n_cases: 10, shape: [32, 32, 32], seed: 3, ambiguity_fraction: 0.3, max_lesions: 2 };
        let cases = generate_dataset(&spec).unwrap();
        assert_eq!(cases.iter().filter(|c| c.kind == CaseKind::Ambiguity).count(), 3);
        for c in &cases {
            c.validate().unwrap();
        }
    }
}
