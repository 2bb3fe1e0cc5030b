//! Baseline-to-follow-up prompt propagation.
//!
//! Two providers produce a dense field: the synthetic truth field with a
//! calibrated smooth perturbation, and a multi-resolution affine registration
//! of the two scans.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::case::LongitudinalCase;
use crate::error::{Error, Result};
use crate::field::{gaussian_smooth, sample_trilinear, DeformationField};
use crate::prompts::propagate_with_jitter;
use crate::volume::{PromptPoint, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistrationMethod {
    TruthNoisy,
    Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub field: DeformationField,
    pub method: RegistrationMethod,
    /// Injected mean perturbation for `TruthNoisy`; for `Affine`, the mean
    /// displacement of the last accepted update (large when not converged).
    pub residual_error_vox: f64,
    pub converged: bool,
}

/// `round(p + u(p))`, clamped to the grid, as a proposed prompt.
pub fn apply_field(field: &DeformationField, p: &PromptPoint) -> Result<PromptPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    propagate_with_jitter(p, field, 0.0, &mut rng)
}

/// Unit-free smooth perturbation: a constant drift plus a low-frequency wave.
fn smooth_perturbation<R: Rng + ?Sized>(shape: [usize; 3], rng: &mut R) -> DeformationField {
    let mut dir = [0.0f64; 3];
    loop {
        for d in dir.iter_mut() {
            *d = rng.random_range(-1.0..1.0);
        }
        let n = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            dir.iter_mut().for_each(|d| *d /= n);
            break;
        }
    }
    let amp: [[f64; 3]; 3] = [0, 1, 2].map(|_| [0, 1, 2].map(|_| rng.random_range(-0.3..0.3)));
    let phase: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let comps = [0, 1, 2].map(|k| {
        Array3::from_shape_fn(shape, |(z, y, x)| {
            let p = [z, y, x];
            let wave: f64 = (0..3)
                .map(|a| amp[k][a] * (std::f64::consts::TAU * p[a] as f64 / shape[a] as f64 + phase[a]).sin())
                .sum();
            dir[k] + wave
        })
    });
    DeformationField::from_components(comps)
}

/// Truth field followed by a smooth perturbation whose mean magnitude over
/// the grid is exactly `error_vox`.
pub fn truth_with_noise<R: Rng + ?Sized>(case: &LongitudinalCase, error_vox: f64, rng: &mut R) -> Result<RegistrationResult> {
    let truth = case.truth_field.as_ref().ok_or_else(|| Error::MissingField(case.case_id.clone()))?;
    if !(error_vox >= 0.0) {
        return Err(Error::Config(format!("error_vox must be non-negative, got {error_vox}")));
    }
    let field = if error_vox == 0.0 {
        truth.clone()
    } else {
        let unit = smooth_perturbation(truth.shape(), rng);
        // Composition is linear in the perturbation, so calibrate on the unit field.
        let composed = truth.then(&unit)?;
        let diff = difference(&composed, truth);
        let scale = error_vox / diff.mean_magnitude();
        truth.then(&unit.scaled(scale))?
    };
    Ok(RegistrationResult { field, method: RegistrationMethod::TruthNoisy, residual_error_vox: error_vox, converged: true })
}

pub fn difference(a: &DeformationField, b: &DeformationField) -> DeformationField {
    DeformationField::new(a.disp() - b.disp()).expect("finite difference of finite fields")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineConfig {
    pub levels: usize,
    pub max_iters: usize,
    /// Stop a level once an update moves voxels by less than this on average.
    pub tolerance_vox: f64,
    /// Levenberg damping added to the normal equations.
    pub damping: f64,
}

impl Default for AffineConfig {
    fn default() -> Self {
        Self { levels: 3, max_iters: 60, tolerance_vox: 1e-3, damping: 1e-3 }
    }
}

/// Affine map `x -> x + R * A (x - c) / R + t` stored as 12 parameters:
/// the row-major 3x3 `A` followed by `t` (voxels at full resolution).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams(pub [f64; 12]);

impl AffineParams {
    pub fn identity() -> Self {
        Self([0.0; 12])
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.0[9], self.0[10], self.0[11]]
    }

    fn displacement(&self, x: [f64; 3], center: [f64; 3], t_scale: f64) -> [f64; 3] {
        let d = [x[0] - center[0], x[1] - center[1], x[2] - center[2]];
        [0, 1, 2].map(|k| (0..3).map(|j| self.0[3 * k + j] * d[j]).sum::<f64>() + self.0[9 + k] * t_scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineOutcome {
    pub params: AffineParams,
    /// Loss after every accepted step, per pyramid level (coarsest first).
    pub loss_history: Vec<Vec<f64>>,
    pub result: RegistrationResult,
}

fn downsample(a: &Array3<f32>) -> Array3<f32> {
    let smoothed = gaussian_smooth(&a.mapv(|v| v as f64), 1.0);
    let d = smoothed.dim();
    let s = [d.0.div_ceil(2), d.1.div_ceil(2), d.2.div_ceil(2)];
    Array3::from_shape_fn(s, |(z, y, x)| smoothed[[2 * z, 2 * y, 2 * x]] as f32)
}

struct Level {
    fixed: Array3<f32>,
    moving: Array3<f32>,
    grad: [Array3<f32>; 3],
    center: [f64; 3],
    /// Voxel size of this level in full-resolution voxels.
    factor: f64,
}

fn gradients(a: &Array3<f32>) -> [Array3<f32>; 3] {
    let d = a.dim();
    let s = [d.0, d.1, d.2];
    [0, 1, 2].map(|axis| {
        Array3::from_shape_fn(d, |(z, y, x)| {
            let p = [z, y, x];
            let mut lo = p;
            let mut hi = p;
            if p[axis] > 0 {
                lo[axis] -= 1;
            }
            if p[axis] + 1 < s[axis] {
                hi[axis] += 1;
            }
            let span = (hi[axis] - lo[axis]).max(1) as f32;
            (a[hi] - a[lo]) / span
        })
    })
}

impl Level {
    fn new(fixed: Array3<f32>, moving: Array3<f32>, factor: f64) -> Self {
        let d = fixed.dim();
        let center = [(d.0 as f64 - 1.0) / 2.0, (d.1 as f64 - 1.0) / 2.0, (d.2 as f64 - 1.0) / 2.0];
        let grad = gradients(&moving);
        Self { fixed, moving, grad, center, factor }
    }

    fn loss(&self, p: &AffineParams) -> f64 {
        let mut sum = 0.0;
        for ((z, y, x), &f) in self.fixed.indexed_iter() {
            let xv = [z as f64, y as f64, x as f64];
            let u = p.displacement(xv, self.center, 1.0 / self.factor);
            let m = sample_trilinear(&self.moving, [xv[0] + u[0], xv[1] + u[1], xv[2] + u[2]]);
            sum += (m - f as f64).powi(2);
        }
        sum / self.fixed.len() as f64
    }

    /// Gauss-Newton normal equations `(J^T J, J^T r)`.
    fn normal_equations(&self, p: &AffineParams) -> ([[f64; 12]; 12], [f64; 12]) {
        let mut jtj = [[0.0f64; 12]; 12];
        let mut jtr = [0.0f64; 12];
        let n = self.fixed.len() as f64;
        for ((z, y, x), &f) in self.fixed.indexed_iter() {
            let xv = [z as f64, y as f64, x as f64];
            let u = p.displacement(xv, self.center, 1.0 / self.factor);
            let q = [xv[0] + u[0], xv[1] + u[1], xv[2] + u[2]];
            let r = sample_trilinear(&self.moving, q) - f as f64;
            let g = [0, 1, 2].map(|k| sample_trilinear(&self.grad[k], q));
            let d = [xv[0] - self.center[0], xv[1] - self.center[1], xv[2] - self.center[2]];
            let mut row = [0.0f64; 12];
            for k in 0..3 {
                for j in 0..3 {
                    row[3 * k + j] = g[k] * d[j];
                }
                row[9 + k] = g[k] / self.factor;
            }
            for a in 0..12 {
                jtr[a] += row[a] * r / n;
                for b in a..12 {
                    jtj[a][b] += row[a] * row[b] / n;
                }
            }
        }
        for a in 0..12 {
            for b in 0..a {
                jtj[a][b] = jtj[b][a];
            }
        }
        (jtj, jtr)
    }

    fn mean_step(&self, step: &[f64; 12]) -> f64 {
        // Mean displacement change over the level grid, in full-resolution voxels.
        let delta = AffineParams(*step);
        let mut sum = 0.0;
        for ((z, y, x), _) in self.fixed.indexed_iter() {
            let u = delta.displacement([z as f64, y as f64, x as f64], self.center, 1.0 / self.factor);
            sum += u.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        sum / self.fixed.len() as f64 * self.factor
    }
}

/// Solves `m x = b` by Gaussian elimination with partial pivoting.
fn solve12(mut m: [[f64; 12]; 12], mut b: [f64; 12]) -> Option<[f64; 12]> {
    for col in 0..12 {
        let pivot = (col..12).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..12 {
            let f = m[row][col] / m[col][col];
            for k in col..12 {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 12];
    for row in (0..12).rev() {
        let s: f64 = (row + 1..12).map(|k| m[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / m[row][row];
    }
    Some(x)
}

/// Multi-resolution Gauss-Newton fit of a 12-parameter affine transform
/// taking `fixed` coordinates onto `moving`, minimising mean squared
/// intensity error. Only loss-decreasing steps are accepted.
pub fn affine_register_detailed(fixed: &Volume, moving: &Volume, config: &AffineConfig) -> Result<AffineOutcome> {
    if fixed.shape() != moving.shape() {
        return Err(Error::Shape(format!("fixed {:?} vs moving {:?}", fixed.shape(), moving.shape())));
    }
    if config.levels == 0 {
        return Err(Error::Config("at least one pyramid level is required".into()));
    }
    let mut pyramid = vec![(fixed.data().clone(), moving.data().clone())];
    for _ in 1..config.levels {
        let (f, m) = pyramid.last().unwrap();
        if f.dim().0 < 4 || f.dim().1 < 4 || f.dim().2 < 4 {
            break;
        }
        pyramid.push((downsample(f), downsample(m)));
    }
    let full_center = {
        let s = fixed.shape();
        [(s[0] as f64 - 1.0) / 2.0, (s[1] as f64 - 1.0) / 2.0, (s[2] as f64 - 1.0) / 2.0]
    };

    let mut params = AffineParams::identity();
    let mut history = Vec::new();
    let mut converged = false;
    let mut last_step = 0.0;
    for (depth, (f, m)) in pyramid.into_iter().enumerate().rev() {
        let level = Level::new(f, m, (1u64 << depth) as f64);
        let mut loss = level.loss(&params);
        let mut losses = vec![loss];
        converged = false;
        for _ in 0..config.max_iters {
            let (jtj, jtr) = level.normal_equations(&params);
            let mut damping = config.damping;
            let mut accepted = None;
            for _ in 0..12 {
                let mut a = jtj;
                for (i, row) in a.iter_mut().enumerate() {
                    row[i] += damping * (1.0 + jtj[i][i]);
                }
                let Some(step) = solve12(a, jtr.map(|v| -v)) else {
                    damping *= 10.0;
                    continue;
                };
                let mut trial = params;
                for i in 0..12 {
                    trial.0[i] += step[i];
                }
                let trial_loss = level.loss(&trial);
                if trial_loss <= loss {
                    accepted = Some((trial, trial_loss, step));
                    break;
                }
                damping *= 10.0;
            }
            let Some((trial, trial_loss, step)) = accepted else {
                converged = true;
                break;
            };
            params = trial;
            loss = trial_loss;
            losses.push(loss);
            last_step = level.mean_step(&step);
            if last_step < config.tolerance_vox {
                converged = true;
                break;
            }
        }
        history.push(losses);
    }

    let s = fixed.shape();
    let comps = [0, 1, 2].map(|k| {
        Array3::from_shape_fn(s, |(z, y, x)| params.displacement([z as f64, y as f64, x as f64], full_center, 1.0)[k])
    });
    let field = DeformationField::from_components(comps);
    Ok(AffineOutcome {
        params,
        loss_history: history,
        result: RegistrationResult {
            field,
            method: RegistrationMethod::Affine,
            residual_error_vox: if converged { last_step.min(config.tolerance_vox) } else { last_step },
            converged,
        },
    })
}

pub fn affine_register(fixed: &Volume, moving: &Volume, config: &AffineConfig) -> Result<RegistrationResult> {
    affine_register_detailed(fixed, moving, config).map(|o| o.result)
}

/// The registration-proposed follow-up click for one lesion.
pub fn propose_followup_prompt(case: &LongitudinalCase, lesion_id: u32, reg: &RegistrationResult) -> Result<PromptPoint> {
    let p0 = case.baseline_prompts.get(&lesion_id).ok_or(Error::MissingLesion(lesion_id))?;
    apply_field(&reg.field, p0)
}

/// Registration provider selected by configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum RegistrationConfig {
    Truth { error_vox: f64, seed: u64 },
    Affine(AffineConfig),
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig::Truth { error_vox: 0.0, seed: 0 }
    }
}

impl RegistrationConfig {
    /// Registers one case. The truth provider derives its perturbation from
    /// `seed` and the case id, so repeated runs agree.
    pub fn register(&self, case: &LongitudinalCase) -> Result<RegistrationResult> {
        match self {
            RegistrationConfig::Truth { error_vox, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::util::stable_hash(case.case_id.as_bytes()));
                truth_with_noise(case, *error_vox, &mut rng)
            }
            RegistrationConfig::Affine(cfg) => affine_register(&case.baseline.volume, &case.followup.volume, cfg),
        }
    }
}
