//! Loss, optimisation loop and the pretrain-then-finetune schedule.

use std::path::PathBuf;

use ndarray::Array3;
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::case::LongitudinalCase;
use crate::error::{Error, Result};
use crate::metrics::dsc;
use crate::net::{checkpoint, voi_inputs, Model, NetConfig};
use crate::prompts::{choose_training_prompt, sample_mask_prompt, verified_followup_prompt};
use crate::volume::{centroid, crop_array, PromptPoint, PromptRole, VoiWindow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub lr_decay_power: f64,
    pub grad_clip: f64,
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub seed: u64,
    pub prompt_sim_enabled: bool,
    /// Std of the jitter added to registered training prompts.
    pub prompt_noise_vox: f64,
    pub val_fraction: f64,
    /// Samples drawn per epoch; every training lesion once when unset.
    pub samples_per_epoch: Option<usize>,
    pub augment_flips: bool,
    pub pretrain_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 2,
            lr: 0.01,
            momentum: 0.99,
            nesterov: true,
            weight_decay: 3e-5,
            lr_decay_power: 0.9,
            grad_clip: 12.0,
            dice_weight: 1.0,
            ce_weight: 1.0,
            seed: 0,
            prompt_sim_enabled: true,
            prompt_noise_vox: 1.0,
            val_fraction: 0.2,
            samples_per_epoch: None,
            augment_flips: true,
            pretrain_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.dice_weight < 0.0 || self.ce_weight < 0.0 || self.dice_weight + self.ce_weight <= 0.0 {
            return Err(Error::Config("loss weights must be non-negative with a positive sum".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs == 0 {
            return self.lr;
        }
        self.lr * (1.0 - epoch as f64 / self.epochs as f64).max(0.0).powf(self.lr_decay_power)
    }
}

fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("finite constant")
}

fn soft_dice_terms<T: Float>(p: &[T], t: &[T]) -> (T, T) {
    let inter = p.iter().zip(t).fold(T::zero(), |a, (&x, &y)| a + x * y);
    let denom = p.iter().fold(T::zero(), |a, &x| a + x) + t.iter().fold(T::zero(), |a, &x| a + x) + T::one();
    (inter, denom)
}

/// `dice_weight * (1 - soft Dice) + ce_weight * mean BCE` on probabilities,
/// with its gradient. Dice uses smoothing 1 in numerator and denominator.
pub fn dice_ce_loss<T: Float>(probabilities: &[T], target: &[T], dice_weight: f64, ce_weight: f64) -> Result<(T, Vec<T>)> {
    if probabilities.len() != target.len() || probabilities.is_empty() {
        return Err(Error::Shape(format!("{} probabilities vs {} targets", probabilities.len(), target.len())));
    }
    let n: T = cast(probabilities.len() as f64);
    let eps: T = cast(1e-7);
    let (inter, denom) = soft_dice_terms(probabilities, target);
    let num = cast::<T>(2.0) * inter + T::one();
    let dice = num / denom;
    let mut ce = T::zero();
    let (dw, cw) = (cast::<T>(dice_weight), cast::<T>(ce_weight));
    let mut grad = Vec::with_capacity(probabilities.len());
    for (&p, &t) in probabilities.iter().zip(target) {
        let pc = p.max(eps).min(T::one() - eps);
        ce = ce - (t * pc.ln() + (T::one() - t) * (T::one() - pc).ln());
        let dce = (pc - t) / (pc * (T::one() - pc)) / n;
        let ddice = (cast::<T>(2.0) * t * denom - num) / (denom * denom);
        grad.push(cw * dce - dw * ddice);
    }
    let loss = dw * (T::one() - dice) + cw * ce / n;
    Ok((loss, grad))
}

/// The same loss evaluated on logits, returning the gradient with respect
/// to the logits. Cross-entropy uses the overflow-free logits form.
pub fn dice_ce_loss_logits<T: Float>(logits: &[T], target: &[T], dice_weight: f64, ce_weight: f64) -> Result<(T, Vec<T>)> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(Error::Shape(format!("{} logits vs {} targets", logits.len(), target.len())));
    }
    let n: T = cast(logits.len() as f64);
    let p: Vec<T> = logits.iter().map(|&z| T::one() / (T::one() + (-z).exp())).collect();
    let (inter, denom) = soft_dice_terms(&p, target);
    let num = cast::<T>(2.0) * inter + T::one();
    let (dw, cw) = (cast::<T>(dice_weight), cast::<T>(ce_weight));
    let mut ce = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for ((&z, &t), &pv) in logits.iter().zip(target).zip(&p) {
        ce = ce + z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln();
        let ddice = (cast::<T>(2.0) * t * denom - num) / (denom * denom);
        grad.push(cw * (pv - t) / n - dw * ddice * pv * (T::one() - pv));
    }
    let loss = dw * (T::one() - num / denom) + cw * ce / n;
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_dsc: Option<f64>,
}

impl TrainLog {
    /// One JSON object per line: a header, then one record per epoch.
    pub fn to_json_lines(&self) -> String {
        let mut out = serde_json::json!({
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "best_val_dsc": self.best_val_dsc,
        })
        .to_string();
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }
}

/// One lesion of one case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LesionRef {
    pub case: usize,
    pub lesion_id: u32,
}

pub fn lesion_refs(cases: &[&LongitudinalCase]) -> Vec<LesionRef> {
    cases
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.lesion_ids().into_iter().map(move |lesion_id| LesionRef { case: i, lesion_id }))
        .collect()
}

/// Deterministic case split: `(train, val)` index lists.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5717));
    let mut n_val = (val_fraction * n as f64).round() as usize;
    if n >= 2 && val_fraction > 0.0 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

/// Binary follow-up target for one lesion inside `window`.
pub fn lesion_target(case: &LongitudinalCase, lesion_id: u32, window: &VoiWindow) -> Array3<bool> {
    let full = case.followup.mask.labels().mapv(|l| l == lesion_id);
    crop_array(&full, window, false)
}

/// Baseline and follow-up clicks used for one training sample.
pub fn training_prompts<R: Rng + ?Sized>(
    case: &LongitudinalCase,
    lesion_id: u32,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(PromptPoint, PromptPoint)> {
    let p0 = sample_mask_prompt(&case.baseline.mask, lesion_id, rng)?.with_role(PromptRole::Baseline);
    let pt = if cfg.prompt_sim_enabled {
        choose_training_prompt(case, &p0, cfg.prompt_noise_vox, rng)?.0
    } else if case.followup.mask.contains(lesion_id) {
        centroid(&case.followup.mask, lesion_id)?
    } else {
        verified_followup_prompt(case, lesion_id)?
    };
    Ok((p0, pt))
}

/// Mean validation DSC with reader-verified prompts, thresholding at 0.5.
pub fn validation_dsc(model: &Model, cases: &[&LongitudinalCase]) -> Result<Option<f64>> {
    let refs = lesion_refs(cases);
    if refs.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for r in &refs {
        let case = cases[r.case];
        let p0 = case.baseline_prompts[&r.lesion_id];
        let pt = verified_followup_prompt(case, r.lesion_id)?;
        let (x0, xt, window) = voi_inputs(model, &case.baseline.volume, &p0, &case.followup.volume, &pt)?;
        let pred = model.probabilities(&x0, &xt)?.mapv(|p| p > 0.5);
        total += dsc(&pred, &lesion_target(case, r.lesion_id, &window))?;
    }
    Ok(Some(total / refs.len() as f64))
}

struct Sgd {
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    fn step(&mut self, model: &mut Model, grads: &mut [Vec<f32>], cfg: &TrainConfig, lr: f64, scale: f32) {
        let params = &mut model.params_mut().params;
        let mut norm2 = 0.0f64;
        for (g, p) in grads.iter_mut().zip(params.iter()) {
            for (gv, &pv) in g.iter_mut().zip(&p.data) {
                *gv = *gv * scale + cfg.weight_decay as f32 * pv;
                norm2 += (*gv as f64).powi(2);
            }
        }
        let clip = if cfg.grad_clip > 0.0 && norm2.sqrt() > cfg.grad_clip { (cfg.grad_clip / norm2.sqrt()) as f32 } else { 1.0 };
        let (mu, lr) = (cfg.momentum as f32, lr as f32);
        for ((g, v), p) in grads.iter().zip(self.velocity.iter_mut()).zip(params.iter_mut()) {
            for ((&gv, vv), pv) in g.iter().zip(v.iter_mut()).zip(p.data.iter_mut()) {
                let gv = gv * clip;
                *vv = mu * *vv + gv;
                let update = if cfg.nesterov { gv + mu * *vv } else { *vv };
                *pv -= lr * update;
            }
        }
    }
}

fn flip_bool(a: &Array3<bool>, axes: [bool; 3]) -> Array3<bool> {
    let mut v = a.view();
    for (ax, &f) in axes.iter().enumerate() {
        if f {
            v.invert_axis(ndarray::Axis(ax));
        }
    }
    v.to_owned()
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: Model,
    pub log: TrainLog,
}

fn has_followup_lesion(cases: &[&LongitudinalCase]) -> bool {
    cases.iter().any(|c| c.lesion_ids().iter().any(|&id| c.followup.mask.contains(id)))
}

/// Trains a fresh model, or one loaded from `cfg.pretrain_checkpoint`.
pub fn fit(dataset: &[LongitudinalCase], net_config: &NetConfig, cfg: &TrainConfig) -> Result<FitOutput> {
    let init = match &cfg.pretrain_checkpoint {
        Some(path) => Some(checkpoint::load(path)?.0),
        None => None,
    };
    fit_from(dataset, net_config, cfg, init, "train")
}

/// Trains from `init` (or a seeded fresh model) and returns the checkpoint
/// with the best validation DSC.
pub fn fit_from(
    dataset: &[LongitudinalCase],
    net_config: &NetConfig,
    cfg: &TrainConfig,
    init: Option<Model>,
    phase: &str,
) -> Result<FitOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput);
    }
    let all: Vec<&LongitudinalCase> = dataset.iter().collect();
    if !has_followup_lesion(&all) {
        return Err(Error::EmptyTask);
    }
    let mut model = match init {
        Some(m) if !m.config().compatible_with(net_config) => {
            return Err(Error::Config("initial model configuration differs from the requested one".into()))
        }
        Some(m) => m,
        None => Model::new(net_config.clone(), cfg.seed)?,
    };
    let (train_idx, val_idx) = split_indices(dataset.len(), cfg.val_fraction, cfg.seed);
    let train: Vec<&LongitudinalCase> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let val: Vec<&LongitudinalCase> = val_idx.iter().map(|&i| &dataset[i]).collect();
    let refs = lesion_refs(&train);
    if refs.is_empty() {
        return Err(Error::EmptyTask);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd { velocity: model.params().zeros_like() };
    let mut log = TrainLog { seed: cfg.seed, records: Vec::new(), best_epoch: None, best_val_dsc: None };
    let mut best: Option<(f64, Model)> = None;
    let per_epoch = cfg.samples_per_epoch.unwrap_or(refs.len());

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<LesionRef> = if cfg.samples_per_epoch.is_some() {
            (0..per_epoch).map(|_| refs[rng.random_range(0..refs.len())]).collect()
        } else {
            refs.clone()
        };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut grads = model.params().zeros_like();
        let mut in_batch = 0;
        for (k, r) in order.iter().enumerate() {
            let case = train[r.case];
            let (p0, pt) = training_prompts(case, r.lesion_id, cfg, &mut rng)?;
            let (mut x0, mut xt, window) = voi_inputs(&model, &case.baseline.volume, &p0, &case.followup.volume, &pt)?;
            let mut target = lesion_target(case, r.lesion_id, &window);
            if cfg.augment_flips {
                let axes = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
                if axes.iter().any(|&a| a) {
                    x0 = x0.flipped(axes);
                    xt = xt.flipped(axes);
                    target = flip_bool(&target, axes);
                }
            }
            let t: Vec<f32> = target.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let (dw, cw) = (cfg.dice_weight, cfg.ce_weight);
            let loss = model.accumulate_gradients(&x0, &xt, &mut grads, |logits| {
                let (l, g) = dice_ce_loss_logits(logits, &t, dw, cw).expect("logits match the VOI");
                (l as f64, g)
            })?;
            loss_sum += loss;
            in_batch += 1;
            if in_batch == cfg.batch_size || k + 1 == order.len() {
                opt.step(&mut model, &mut grads, cfg, lr, 1.0 / in_batch as f32);
                grads.iter_mut().for_each(|g| g.fill(0.0));
                in_batch = 0;
            }
        }
        let train_loss = loss_sum / order.len().max(1) as f64;
        let val_dsc = validation_dsc(&model, &val)?;
        log::debug!("{phase} epoch {epoch}: loss {train_loss:.4} val {val_dsc:?}");
        log.records.push(EpochRecord { phase: phase.to_string(), epoch, train_loss, val_dsc, lr });
        let score = val_dsc.unwrap_or(-train_loss);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model.clone()));
            log.best_epoch = Some(epoch);
            log.best_val_dsc = val_dsc;
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok(FitOutput { model, log })
}

/// Fits on `pretrain`, then on `finetune` starting from the pretrained weights.
pub fn pretrain_finetune(
    pretrain: &[LongitudinalCase],
    finetune: &[LongitudinalCase],
    pretrain_net: &NetConfig,
    finetune_net: &NetConfig,
    pretrain_cfg: &TrainConfig,
    finetune_cfg: &TrainConfig,
) -> Result<FitOutput> {
    if !pretrain_net.compatible_with(finetune_net) {
        return Err(Error::Config("pretraining and finetuning network configurations differ".into()));
    }
    if pretrain.is_empty() || finetune.is_empty() {
        return Err(Error::EmptyInput);
    }
    let first = if pretrain_cfg.epochs == 0 {
        FitOutput {
            model: Model::new(pretrain_net.clone(), pretrain_cfg.seed)?,
            log: TrainLog { seed: pretrain_cfg.seed, records: Vec::new(), best_epoch: None, best_val_dsc: None },
        }
    } else {
        fit_from(pretrain, pretrain_net, pretrain_cfg, None, "pretrain")?
    };
    let mut second = fit_from(finetune, finetune_net, finetune_cfg, Some(first.model), "finetune")?;
    let mut records = first.log.records;
    records.append(&mut second.log.records);
    second.log.records = records;
    Ok(second)
}

/// A VOI-sized prediction thresholded at 0.5.
pub fn threshold(probabilities: &Array3<f32>) -> Array3<bool> {
    probabilities.mapv(|p| p > 0.5)
}
