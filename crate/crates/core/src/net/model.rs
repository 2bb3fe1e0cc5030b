use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{ConvSpec, Graph, ParamStore, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::prompts::{gaussian_heatmap, PromptHeatmap};
use crate::volume::{crop_pad, PromptPoint, Volume, VoiWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    SingleTimepoint,
    Concat,
    DiffWeighting,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::SingleTimepoint, FusionMode::Concat, FusionMode::DiffWeighting];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::SingleTimepoint => "single_timepoint",
            FusionMode::Concat => "concat",
            FusionMode::DiffWeighting => "diff_weighting",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub n_levels: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub fusion_mode: FusionMode,
    pub voi_size: [usize; 3],
    pub instnorm_epsilon: f64,
    /// Learnable scale and shift on the normalised difference.
    pub instnorm_affine: bool,
    pub blocks_per_level: usize,
    pub heatmap_sigma: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            n_levels: 4,
            base_channels: 16,
            max_channels: 128,
            fusion_mode: FusionMode::DiffWeighting,
            voi_size: [64, 64, 64],
            instnorm_epsilon: 1e-5,
            instnorm_affine: true,
            blocks_per_level: 1,
            heatmap_sigma: 1.0,
        }
    }
}

impl NetConfig {
    /// Small configuration for phantom experiments on a CPU.
    pub fn compact(fusion_mode: FusionMode) -> Self {
        Self { n_levels: 3, base_channels: 8, max_channels: 32, fusion_mode, voi_size: [16, 16, 16], ..Self::default() }
    }

    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_levels < 3 {
            return Err(Error::Config(format!("n_levels must be at least 3, got {}", self.n_levels)));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::Config("channel widths must be positive and max >= base".into()));
        }
        if !(self.instnorm_epsilon > 0.0) || !(self.heatmap_sigma > 0.0) {
            return Err(Error::Config("instnorm_epsilon and heatmap_sigma must be positive".into()));
        }
        let unit = 1usize << (self.n_levels - 1);
        if self.voi_size.iter().any(|&s| s == 0 || s % unit != 0) {
            return Err(Error::Config(format!("voi_size {:?} must be divisible by {unit}", self.voi_size)));
        }
        Ok(())
    }

    /// Same architecture and parameter layout, ignoring nothing.
    pub fn compatible_with(&self, other: &NetConfig) -> bool {
        self == other
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv1: ConvSpec,
    norm1: Norm,
    conv2: ConvSpec,
    norm2: Norm,
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    entry: ConvSpec,
    entry_norm: Norm,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone, Copy)]
enum Fuse {
    Follow,
    Project(ConvSpec),
    Difference(Option<Norm>),
}

#[derive(Debug, Clone, Copy)]
struct DecoderLevel {
    up_weight: usize,
    up_bias: usize,
    conv: ConvSpec,
    norm: Norm,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<EncoderLevel>,
    fuse: Vec<Fuse>,
    decoder: Vec<DecoderLevel>,
    head: ConvSpec,
    encoder_params: std::ops::Range<usize>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, co: usize, ci: usize, kernel: usize, stride: usize, bias: bool) -> ConvSpec {
        let fan_in = ci * kernel.pow(3);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..co * fan_in).map(|_| normal.sample(&mut self.rng) as f32).collect();
        let weight = self.store.push(format!("{name}.weight"), vec![co, ci, kernel, kernel, kernel], data);
        let bias = bias.then(|| self.store.push(format!("{name}.bias"), vec![co], vec![0.0; co]));
        ConvSpec { weight, bias, kernel, stride }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self.store.push(format!("{name}.gamma"), vec![c], vec![1.0; c]);
        let beta = self.store.push(format!("{name}.beta"), vec![c], vec![0.0; c]);
        Norm { gamma, beta }
    }

    fn up(&mut self, name: &str, ci: usize, co: usize) -> (usize, usize) {
        let normal = Normal::new(0.0, (2.0 / ci as f64).sqrt()).expect("positive std");
        let data = (0..ci * co * 8).map(|_| normal.sample(&mut self.rng) as f32).collect();
        let w = self.store.push(format!("{name}.weight"), vec![ci, co, 2, 2, 2], data);
        let b = self.store.push(format!("{name}.bias"), vec![co], vec![0.0; co]);
        (w, b)
    }
}

impl Layout {
    fn build(config: &NetConfig, store: &mut ParamStore, seed: u64) -> Layout {
        let mut b = Builder { store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let start = b.store.len();
        let mut encoder = Vec::new();
        for l in 0..config.n_levels {
            let c = config.channels(l);
            let (ci, stride) = if l == 0 { (2, 1) } else { (config.channels(l - 1), 2) };
            let entry = b.conv(&format!("enc{l}.entry"), c, ci, 3, stride, false);
            let entry_norm = b.norm(&format!("enc{l}.entry_norm"), c);
            let blocks = (0..config.blocks_per_level)
                .map(|k| Block {
                    conv1: b.conv(&format!("enc{l}.block{k}.conv1"), c, c, 3, 1, false),
                    norm1: b.norm(&format!("enc{l}.block{k}.norm1"), c),
                    conv2: b.conv(&format!("enc{l}.block{k}.conv2"), c, c, 3, 1, false),
                    norm2: b.norm(&format!("enc{l}.block{k}.norm2"), c),
                })
                .collect();
            encoder.push(EncoderLevel { entry, entry_norm, blocks });
        }
        let encoder_params = start..b.store.len();
        let fuse = (0..config.n_levels)
            .map(|l| {
                let c = config.channels(l);
                match config.fusion_mode {
                    FusionMode::SingleTimepoint => Fuse::Follow,
                    FusionMode::Concat => Fuse::Project(b.conv(&format!("fuse{l}.project"), c, 2 * c, 1, 1, true)),
                    FusionMode::DiffWeighting => Fuse::Difference(config.instnorm_affine.then(|| b.norm(&format!("fuse{l}.dwb"), c))),
                }
            })
            .collect();
        let decoder = (0..config.n_levels - 1)
            .map(|l| {
                let (c, below) = (config.channels(l), config.channels(l + 1));
                let (up_weight, up_bias) = b.up(&format!("dec{l}.up"), below, c);
                DecoderLevel {
                    up_weight,
                    up_bias,
                    conv: b.conv(&format!("dec{l}.conv"), c, 2 * c, 3, 1, false),
                    norm: b.norm(&format!("dec{l}.norm"), c),
                }
            })
            .collect();
        let head = b.conv("head", 1, config.channels(0), 1, 1, true);
        Layout { encoder, fuse, decoder, head, encoder_params }
    }
}

/// Promptable dual-timepoint segmentation network.
#[derive(Debug, Clone)]
pub struct Model {
    config: NetConfig,
    params: ParamStore,
    layout: Layout,
}

/// `[I, G(p)]`: the z-scored image VOI stacked with the raw heatmap.
pub fn fuse_input(image_voi: &Volume, heatmap: &PromptHeatmap) -> Result<Tensor> {
    let d = heatmap.data.dim();
    if image_voi.shape() != [d.0, d.1, d.2] {
        return Err(Error::Shape(format!("image {:?} vs heatmap {:?}", image_voi.shape(), d)));
    }
    let img = image_voi.data();
    let n = img.len() as f64;
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let mut data: Vec<f32> = if std > 1e-12 {
        img.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
    } else {
        vec![0.0; img.len()]
    };
    data.extend(heatmap.data.iter().map(|&v| v as f32));
    Tensor::from_vec(2, image_voi.shape(), data)
}

impl Model {
    pub fn new(config: NetConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut params = ParamStore::default();
        let layout = Layout::build(&config, &mut params, seed);
        Ok(Model { config, params, layout })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.params.params[self.layout.encoder_params.clone()].iter().map(|p| p.data.len()).sum()
    }

    /// Builds the fused input block for a VOI and its local prompt.
    pub fn input_block(&self, image_voi: &Volume, local_prompt: &PromptPoint) -> Result<Tensor> {
        let h = gaussian_heatmap(local_prompt, image_voi.shape(), self.config.heatmap_sigma)?;
        fuse_input(image_voi, &h)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels != 2 || x.spatial != self.config.voi_size {
            return Err(Error::Shape(format!(
                "input {}x{:?}, expected 2x{:?}",
                x.channels, x.spatial, self.config.voi_size
            )));
        }
        Ok(())
    }

    fn encode_graph(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let eps = self.config.instnorm_epsilon as f32;
        let mut feats = Vec::with_capacity(self.layout.encoder.len());
        let mut h = x;
        for level in &self.layout.encoder {
            h = g.conv(h, level.entry)?;
            h = g.norm(h, Some((level.entry_norm.gamma, level.entry_norm.beta)), eps);
            h = g.leaky_relu(h);
            for blk in &level.blocks {
                let mut r = g.conv(h, blk.conv1)?;
                r = g.norm(r, Some((blk.norm1.gamma, blk.norm1.beta)), eps);
                r = g.leaky_relu(r);
                r = g.conv(r, blk.conv2)?;
                r = g.norm(r, Some((blk.norm2.gamma, blk.norm2.beta)), eps);
                h = g.add(h, r)?;
                h = g.leaky_relu(h);
            }
            feats.push(h);
        }
        Ok(feats)
    }

    /// Per-level features of one input block.
    pub fn encode(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut g = Graph::no_grad(&self.params);
        let xv = g.input(x.clone());
        let feats = self.encode_graph(&mut g, xv)?;
        Ok(feats.into_iter().map(|v| g.value(v).clone()).collect())
    }

    fn logits_graph(&self, g: &mut Graph, x0: &Tensor, xt: &Tensor) -> Result<Var> {
        self.check_input(x0)?;
        self.check_input(xt)?;
        let xtv = g.input(xt.clone());
        let ft = self.encode_graph(g, xtv)?;
        let f0 = match self.config.fusion_mode {
            FusionMode::SingleTimepoint => None,
            _ => {
                let x0v = g.input(x0.clone());
                Some(self.encode_graph(g, x0v)?)
            }
        };
        self.decode_graph(g, f0.as_deref(), &ft)
    }

    fn decode_graph(&self, g: &mut Graph, f0: Option<&[Var]>, ft: &[Var]) -> Result<Var> {
        let eps = self.config.instnorm_epsilon as f32;
        let mut skips = Vec::with_capacity(ft.len());
        for (l, fuse) in self.layout.fuse.iter().enumerate() {
            let s = match (fuse, f0) {
                (Fuse::Follow, _) | (_, None) => ft[l],
                (Fuse::Project(spec), Some(f0)) => {
                    let c = g.concat(f0[l], ft[l])?;
                    g.conv(c, *spec)?
                }
                (Fuse::Difference(aff), Some(f0)) => g.diff_weight(f0[l], ft[l], aff.map(|n| (n.gamma, n.beta)), eps)?,
            };
            skips.push(s);
        }
        let mut h = *skips.last().expect("at least one level");
        for l in (0..self.layout.decoder.len()).rev() {
            let dec = self.layout.decoder[l];
            let u = g.up_conv(h, dec.up_weight, Some(dec.up_bias))?;
            let c = g.concat(u, skips[l])?;
            h = g.conv(c, dec.conv)?;
            h = g.norm(h, Some((dec.norm.gamma, dec.norm.beta)), eps);
            h = g.leaky_relu(h);
        }
        g.conv(h, self.layout.head)
    }

    /// Baseline features for [`Model::probabilities_from`]; `None` when the
    /// fusion mode ignores the baseline.
    pub fn baseline_features(&self, x0: &Tensor) -> Result<Option<Vec<Tensor>>> {
        match self.config.fusion_mode {
            FusionMode::SingleTimepoint => Ok(None),
            _ => self.encode(x0).map(Some),
        }
    }

    /// Same as [`Model::probabilities`] with the baseline already encoded.
    pub fn probabilities_from(&self, f0: Option<&[Tensor]>, xt: &Tensor) -> Result<Array3<f32>> {
        self.check_input(xt)?;
        let levels = self.layout.encoder.len();
        let f0 = match (self.config.fusion_mode, f0) {
            (FusionMode::SingleTimepoint, _) => None,
            (_, Some(f)) if f.len() == levels && f.iter().enumerate().all(|(l, t)| t.channels == self.config.channels(l)) => Some(f),
            _ => return Err(Error::Shape(format!("baseline features do not match the {levels}-level encoder"))),
        };
        let mut g = Graph::no_grad(&self.params);
        let xtv = g.input(xt.clone());
        let ft = self.encode_graph(&mut g, xtv)?;
        let f0v: Option<Vec<Var>> = f0.map(|f| f.iter().map(|t| g.input(t.clone())).collect());
        let out = self.decode_graph(&mut g, f0v.as_deref(), &ft)?;
        Ok(g.value(out).channel_array(0).mapv(sigmoid))
    }

    /// Foreground logits over the follow-up VOI.
    pub fn logits(&self, x0: &Tensor, xt: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad(&self.params);
        let out = self.logits_graph(&mut g, x0, xt)?;
        Ok(g.value(out).clone())
    }

    pub fn probabilities(&self, x0: &Tensor, xt: &Tensor) -> Result<Array3<f32>> {
        let logits = self.logits(x0, xt)?;
        Ok(logits.channel_array(0).mapv(sigmoid))
    }

    /// Probability map over the follow-up VOI. Prompts are VOI-local.
    pub fn forward(&self, i0_voi: &Volume, p0: &PromptPoint, it_voi: &Volume, pt: &PromptPoint) -> Result<Array3<f32>> {
        let x0 = self.input_block(i0_voi, p0)?;
        let xt = self.input_block(it_voi, pt)?;
        self.probabilities(&x0, &xt)
    }

    /// Runs forward and backward. `loss_fn` maps logits to a loss and its
    /// gradient; parameter gradients are added into `grads`.
    pub fn accumulate_gradients<F>(&self, x0: &Tensor, xt: &Tensor, grads: &mut [Vec<f32>], loss_fn: F) -> Result<f64>
    where
        F: FnOnce(&[f32]) -> (f64, Vec<f32>),
    {
        let mut g = Graph::new(&self.params);
        let out = self.logits_graph(&mut g, x0, xt)?;
        let (loss, seed) = loss_fn(&g.value(out).data);
        g.backward(out, seed, grads);
        Ok(loss)
    }

    pub(crate) fn from_parts(config: NetConfig, params: ParamStore) -> Result<Model> {
        let fresh = Model::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, configuration needs {}",
                params.len(),
                fresh.params.len()
            )));
        }
        for (a, b) in fresh.params.params.iter().zip(&params.params) {
            if a.name != b.name || a.shape != b.shape || b.data.len() != a.data.len() {
                return Err(Error::Config(format!("checkpoint tensor {} does not match {}", b.name, a.name)));
            }
        }
        Ok(Model { config: fresh.config, params, layout: fresh.layout })
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Network output for one lesion, with the windows used to crop each scan.
#[derive(Debug, Clone)]
pub struct LesionPrediction {
    pub probabilities: Array3<f32>,
    pub window: VoiWindow,
}

impl LesionPrediction {
    /// Thresholded prediction pasted into a full follow-up grid.
    pub fn full_mask(&self, shape: [usize; 3], threshold: f32) -> Array3<bool> {
        let patch = self.probabilities.mapv(|p| p > threshold);
        crate::volume::paste_array(&patch, &self.window, shape)
    }
}

/// Segments one follow-up lesion given global baseline and follow-up clicks.
pub fn predict_lesion(model: &Model, baseline: &Volume, p0: &PromptPoint, followup: &Volume, pt: &PromptPoint) -> Result<LesionPrediction> {
    let size = model.config.voi_size;
    let (x0, xt, window) = voi_inputs(model, baseline, p0, followup, pt)?;
    debug_assert_eq!(window.size, size);
    Ok(LesionPrediction { probabilities: model.probabilities(&x0, &xt)?, window })
}

/// Segments one follow-up lesion from baseline features computed by
/// [`Model::baseline_features`].
pub fn predict_lesion_from(model: &Model, f0: Option<&[Tensor]>, followup: &Volume, pt: &PromptPoint) -> Result<LesionPrediction> {
    let (xt, window) = prompt_block(model, followup, pt)?;
    Ok(LesionPrediction { probabilities: model.probabilities_from(f0, &xt)?, window })
}

/// Input block for the VOI centred on a global click, plus that VOI's window.
pub fn prompt_block(model: &Model, volume: &Volume, p: &PromptPoint) -> Result<(Tensor, VoiWindow)> {
    let size = model.config.voi_size;
    let w = VoiWindow::centered(p.coord, size);
    let v = crop_pad(volume, p, size, None)?;
    let local = PromptPoint::new(w.to_local(p.coord), p.role, p.lesion_id);
    Ok((model.input_block(&v, &local)?, w))
}

/// Input blocks for a prompt pair plus the follow-up window.
pub fn voi_inputs(model: &Model, baseline: &Volume, p0: &PromptPoint, followup: &Volume, pt: &PromptPoint) -> Result<(Tensor, Tensor, VoiWindow)> {
    let (x0, _) = prompt_block(model, baseline, p0)?;
    let (xt, wt) = prompt_block(model, followup, pt)?;
    Ok((x0, xt, wt))
}
