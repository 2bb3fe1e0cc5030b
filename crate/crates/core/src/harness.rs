//! Experiment orchestration: patient-level splits, the fusion/prompt/pretrain
//! ablation grid, the automatic-versus-verified comparison, and on-disk
//! manifests of longitudinal cases.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::case::{CaseKind, LongitudinalCase, Timepoint};
use crate::error::{Error, Result};
use crate::metrics::{score_lesion, MetricsReport, DEFAULT_BOOTSTRAP, DEFAULT_LDR_THRESHOLD, DEFAULT_NSD_TOLERANCE_MM};
use crate::net::{checkpoint, predict_lesion, FusionMode, Model, NetConfig};
use crate::nifti;
use crate::prompts::verified_followup_prompt;
use crate::registration::{propose_followup_prompt, RegistrationConfig};
use crate::synth::{generate_dataset, DatasetSpec};
use crate::train::{fit_from, pretrain_finetune, split_indices, FitOutput, TrainConfig};
use crate::util::sha256_hex;
use crate::volume::{PromptPoint, PromptRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// Follow-up click proposed by registration alone.
    Automatic,
    /// Follow-up click confirmed by a reader.
    Verified,
}

/// Anything that delineates a follow-up lesion from a pair of clicks.
pub trait Segmenter {
    /// Binary prediction over the full follow-up grid.
    fn segment(&self, case: &LongitudinalCase, p0: &PromptPoint, pt: &PromptPoint) -> Result<Array3<bool>>;
}

impl Segmenter for Model {
    fn segment(&self, case: &LongitudinalCase, p0: &PromptPoint, pt: &PromptPoint) -> Result<Array3<bool>> {
        let pred = predict_lesion(self, &case.baseline.volume, p0, &case.followup.volume, pt)?;
        Ok(pred.full_mask(case.shape(), 0.5))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub nsd_tolerance_mm: f64,
    pub ldr_threshold: f64,
    pub n_bootstrap: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nsd_tolerance_mm: DEFAULT_NSD_TOLERANCE_MM,
            ldr_threshold: DEFAULT_LDR_THRESHOLD,
            n_bootstrap: DEFAULT_BOOTSTRAP,
            seed: 0,
        }
    }
}

/// The follow-up click each paradigm supplies for one lesion.
pub fn paradigm_prompt(case: &LongitudinalCase, lesion_id: u32, paradigm: Paradigm, registration: &RegistrationConfig) -> Result<PromptPoint> {
    match paradigm {
        Paradigm::Verified => verified_followup_prompt(case, lesion_id),
        Paradigm::Automatic => {
            let reg = registration.register(case)?;
            propose_followup_prompt(case, lesion_id, &reg)
        }
    }
}

/// Per-lesion inference under one paradigm, then a bootstrapped report.
pub fn run_paradigm_eval(
    model: &dyn Segmenter,
    cases: &[&LongitudinalCase],
    paradigm: Paradigm,
    registration: &RegistrationConfig,
    eval: &EvalConfig,
) -> Result<MetricsReport> {
    let mut records = Vec::new();
    for case in cases {
        let fields = match paradigm {
            Paradigm::Automatic => Some(registration.register(case)?),
            Paradigm::Verified => None,
        };
        for id in case.lesion_ids() {
            let p0 = case.baseline_prompts[&id];
            let pt = match &fields {
                Some(reg) => propose_followup_prompt(case, id, reg)?,
                None => verified_followup_prompt(case, id)?,
            };
            let pred = model.segment(case, &p0, &pt)?;
            let gt = case.followup.mask.binary(id);
            records.push(score_lesion(
                &case.case_id,
                id,
                &pred,
                &gt,
                case.followup.volume.spacing(),
                eval.nsd_tolerance_mm,
                eval.ldr_threshold,
            )?);
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    MetricsReport::from_records(records, eval.nsd_tolerance_mm, eval.ldr_threshold, eval.n_bootstrap, eval.seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 2.0 / 3.0 * 0.8, val: 2.0 / 3.0 * 0.2, test: 1.0 / 3.0 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {parts:?} must be in [0, 1] and sum to 1")));
        }
        if self.train <= 0.0 {
            return Err(Error::Config("the training split must be non-empty".into()));
        }
        Ok(())
    }

    /// Validation share of the non-test cases.
    pub fn val_within_development(&self) -> f64 {
        if self.train + self.val <= 0.0 {
            0.0
        } else {
            self.val / (self.train + self.val)
        }
    }
}

/// Case indices of a patient-level split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Holds out the test patients, then splits the rest as training does.
pub fn patient_split(n: usize, ratios: &SplitRatios, seed: u64) -> Result<Split> {
    ratios.validate()?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x07e5_75e7));
    let n_test = ((ratios.test * n as f64).round() as usize).min(n);
    let mut test = idx[..n_test].to_vec();
    test.sort_unstable();
    let mut dev = idx[n_test..].to_vec();
    dev.sort_unstable();
    let (tr, va) = split_indices(dev.len(), ratios.val_within_development(), seed);
    Ok(Split { train: tr.iter().map(|&i| dev[i]).collect(), val: va.iter().map(|&i| dev[i]).collect(), test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub fusion_mode: FusionMode,
    pub prompt_sim: bool,
    pub pretrain: bool,
}

impl AblationRow {
    pub fn new(fusion_mode: FusionMode, prompt_sim: bool, pretrain: bool) -> Self {
        let mut name = fusion_mode.name().to_string();
        if fusion_mode != FusionMode::SingleTimepoint {
            name.push_str(if prompt_sim { "+sim" } else { "" });
        }
        if pretrain {
            name.push_str("+pretrain");
        }
        Self { name, fusion_mode, prompt_sim, pretrain }
    }

    /// The six-row grid: single timepoint, concat without and with prompt
    /// simulation and pretraining, and difference weighting.
    pub fn standard_grid() -> Vec<AblationRow> {
        vec![
            AblationRow::new(FusionMode::SingleTimepoint, true, false),
            AblationRow::new(FusionMode::Concat, false, false),
            AblationRow::new(FusionMode::Concat, true, false),
            AblationRow::new(FusionMode::Concat, true, true),
            AblationRow::new(FusionMode::DiffWeighting, true, false),
            AblationRow::new(FusionMode::DiffWeighting, true, true),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub split: SplitRatios,
    pub rows: Vec<AblationRow>,
    pub paradigms: Vec<Paradigm>,
    /// Registration error levels for the automatic paradigm.
    pub error_vox: Vec<f64>,
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Synthetic corpus used by rows with `pretrain` set.
    pub pretrain_dataset: DatasetSpec,
    pub pretrain_epochs: usize,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            split: SplitRatios::default(),
            rows: AblationRow::standard_grid(),
            paradigms: vec![Paradigm::Automatic, Paradigm::Verified],
            error_vox: vec![0.0, 1.0, 2.0, 4.0],
            net: NetConfig { voi_size: [48, 48, 48], ..NetConfig::default() },
            train: TrainConfig::default(),
            pretrain_dataset: DatasetSpec { n_cases: 100, seed: 1_000_000, ambiguity_fraction: 0.0, ..DatasetSpec::default() },
            pretrain_epochs: 50,
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub report: MetricsReport,
    /// Metrics restricted to ambiguity test cases, if any.
    pub ambiguity: Option<MetricsReport>,
    pub provenance: Provenance,
    pub param_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub split: Split,
    pub rows: Vec<AblationResult>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut out = format!("{:<28} {:>13}  {:>13}  {:>5}\n", "row", "DSC", "NSD", "LDR");
        for r in &self.rows {
            out.push_str(&format!("{:<28} {}\n", r.row.name, r.report.percent_row()));
        }
        if self.rows.iter().any(|r| r.ambiguity.is_some()) {
            out.push_str("\nambiguity cases only\n");
            for r in &self.rows {
                if let Some(a) = &r.ambiguity {
                    out.push_str(&format!("{:<28} {}\n", r.row.name, a.percent_row()));
                }
            }
        }
        out
    }
}

/// SHA-256 over case ids, kinds, images, masks and prompts.
pub fn dataset_hash(cases: &[LongitudinalCase]) -> String {
    let mut bytes = Vec::new();
    for c in cases {
        bytes.extend_from_slice(c.case_id.as_bytes());
        bytes.push(c.kind as u8);
        for tp in [&c.baseline, &c.followup] {
            tp.volume.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
            tp.mask.labels().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        }
        for p in c.baseline_prompts.values().chain(c.followup_prompts.values()) {
            p.coord.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        }
    }
    sha256_hex(&bytes)
}

fn config_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("configuration serialises"))
}

/// Row-specific network and training configuration.
pub fn row_configs(spec: &ExperimentSpec, row: &AblationRow) -> (NetConfig, TrainConfig) {
    let net = NetConfig { fusion_mode: row.fusion_mode, ..spec.net.clone() };
    let train = TrainConfig {
        prompt_sim_enabled: row.prompt_sim,
        val_fraction: spec.split.val_within_development(),
        ..spec.train.clone()
    };
    (net, train)
}

/// Trains one row on the development cases (train plus validation).
pub fn train_row(spec: &ExperimentSpec, row: &AblationRow, development: &[LongitudinalCase], pretrain: Option<&[LongitudinalCase]>) -> Result<FitOutput> {
    let (net, train) = row_configs(spec, row);
    match (row.pretrain, pretrain) {
        (true, Some(pre)) => {
            let pre_cfg = TrainConfig { epochs: spec.pretrain_epochs, prompt_sim_enabled: true, ..train.clone() };
            pretrain_finetune(pre, development, &net, &net, &pre_cfg, &train)
        }
        (true, None) => Err(Error::Config(format!("row {} needs a pretraining dataset", row.name))),
        (false, _) => fit_from(development, &net, &train, None, "train"),
    }
}

/// Trains every row on identical splits and evaluates each on the held-out
/// test patients with verified prompts.
pub fn run_ablation(spec: &ExperimentSpec) -> Result<AblationTable> {
    if spec.rows.is_empty() {
        return Err(Error::Config("the ablation needs at least one row".into()));
    }
    let cases = generate_dataset(&spec.dataset)?;
    let pretrain = if spec.rows.iter().any(|r| r.pretrain) {
        Some(generate_dataset(&spec.pretrain_dataset)?)
    } else {
        None
    };
    let split = patient_split(cases.len(), &spec.split, spec.seed)?;
    let development: Vec<LongitudinalCase> = split.train.iter().chain(&split.val).map(|&i| cases[i].clone()).collect();
    let mut development = development;
    development.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let test: Vec<&LongitudinalCase> = split.test.iter().map(|&i| &cases[i]).collect();
    let amb: Vec<&LongitudinalCase> = test.iter().copied().filter(|c| c.kind == CaseKind::Ambiguity).collect();
    let data_hash = dataset_hash(&cases);
    let registration = RegistrationConfig::default();

    let mut rows = Vec::new();
    for row in &spec.rows {
        let fitted = train_row(spec, row, &development, pretrain.as_deref())?;
        let report = run_paradigm_eval(&fitted.model, &test, Paradigm::Verified, &registration, &spec.eval)?;
        let ambiguity = if amb.is_empty() {
            None
        } else {
            Some(run_paradigm_eval(&fitted.model, &amb, Paradigm::Verified, &registration, &spec.eval)?)
        };
        let (net, train) = row_configs(spec, row);
        rows.push(AblationResult {
            row: row.clone(),
            report,
            ambiguity,
            provenance: Provenance {
                seed: train.seed,
                config_hash: config_hash(&(row, &net, &train, &spec.pretrain_dataset, spec.pretrain_epochs)),
                dataset_hash: data_hash.clone(),
            },
            param_hash: checkpoint::param_hash(&fitted.model),
        });
    }
    Ok(AblationTable { split, rows })
}

/// Automatic reports across `error_vox` levels plus one verified report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParadigmSweep {
    pub automatic: Vec<(f64, MetricsReport)>,
    pub verified: MetricsReport,
}

pub fn run_paradigm_sweep(model: &dyn Segmenter, cases: &[&LongitudinalCase], error_vox: &[f64], registration_seed: u64, eval: &EvalConfig) -> Result<ParadigmSweep> {
    let automatic = error_vox
        .iter()
        .map(|&e| {
            let reg = RegistrationConfig::Truth { error_vox: e, seed: registration_seed };
            run_paradigm_eval(model, cases, Paradigm::Automatic, &reg, eval).map(|r| (e, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let verified = run_paradigm_eval(model, cases, Paradigm::Verified, &RegistrationConfig::default(), eval)?;
    Ok(ParadigmSweep { automatic, verified })
}

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    schema: u32,
    cases: Vec<ManifestCase>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestImage {
    image: String,
    mask: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLesion {
    id: u32,
    #[serde(default)]
    baseline_prompt: Option<[i64; 3]>,
    #[serde(default)]
    followup_prompt: Option<[i64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestCase {
    case_id: String,
    #[serde(default)]
    kind: CaseKind,
    baseline: ManifestImage,
    followup: ManifestImage,
    #[serde(default)]
    truth_field: Option<String>,
    lesions: Vec<ManifestLesion>,
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Writes NIfTI files next to `path` and a JSON manifest referencing them.
pub fn save_manifest(cases: &[LongitudinalCase], path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::with_capacity(cases.len());
    let mut seen = BTreeSet::new();
    for c in cases {
        if !seen.insert(c.case_id.clone()) {
            return Err(Error::Validation(format!("duplicate case id {}", c.case_id)));
        }
        let dir = base.join(&c.case_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rel = |name: &str| format!("{}/{name}", c.case_id);
        let spacing = c.baseline.volume.spacing();
        nifti::write_volume(base.join(rel("baseline.nii.gz")), &c.baseline.volume)?;
        nifti::write_mask(base.join(rel("baseline_mask.nii.gz")), &c.baseline.mask, spacing)?;
        nifti::write_volume(base.join(rel("followup.nii.gz")), &c.followup.volume)?;
        nifti::write_mask(base.join(rel("followup_mask.nii.gz")), &c.followup.mask, c.followup.volume.spacing())?;
        let truth_field = match &c.truth_field {
            Some(f) => {
                nifti::write_field(base.join(rel("truth_field.nii.gz")), f, spacing)?;
                Some(rel("truth_field.nii.gz"))
            }
            None => None,
        };
        let ids: BTreeSet<u32> = c.baseline_prompts.keys().chain(c.followup_prompts.keys()).copied().collect();
        let lesions = ids
            .into_iter()
            .map(|id| ManifestLesion {
                id,
                baseline_prompt: c.baseline_prompts.get(&id).map(|p| p.coord),
                followup_prompt: c.followup_prompts.get(&id).map(|p| p.coord),
            })
            .collect();
        entries.push(ManifestCase {
            case_id: c.case_id.clone(),
            kind: c.kind,
            baseline: ManifestImage { image: rel("baseline.nii.gz"), mask: rel("baseline_mask.nii.gz") },
            followup: ManifestImage { image: rel("followup.nii.gz"), mask: rel("followup_mask.nii.gz") },
            truth_field,
            lesions,
        });
    }
    let json = serde_json::to_string_pretty(&ManifestFile { schema: MANIFEST_SCHEMA, cases: entries }).expect("manifest serialises");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Reads a manifest and every file it references.
pub fn load_manifest(path: &Path) -> Result<Vec<LongitudinalCase>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(&ctx, e.to_string()))?;
    match raw.get("schema").and_then(|s| s.as_u64()) {
        Some(v) if v == MANIFEST_SCHEMA as u64 => {}
        Some(v) => return Err(Error::parse(&ctx, format!("unsupported schema version {v}"))),
        None => return Err(Error::parse(&ctx, "missing field `schema`")),
    }
    let file: ManifestFile = serde_json::from_value(raw).map_err(|e| Error::parse(&ctx, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(file.cases.len());
    for mc in file.cases {
        let case_ctx = format!("{ctx}: case {}", mc.case_id);
        let baseline = Timepoint::new(
            nifti::read_volume(resolve(base, &mc.baseline.image))?,
            nifti::read_mask(resolve(base, &mc.baseline.mask))?,
        )?;
        let followup = Timepoint::new(
            nifti::read_volume(resolve(base, &mc.followup.image))?,
            nifti::read_mask(resolve(base, &mc.followup.mask))?,
        )?;
        let truth_field = match &mc.truth_field {
            Some(p) => Some(nifti::read_field(resolve(base, p))?),
            None => None,
        };
        let mut baseline_prompts = BTreeMap::new();
        let mut followup_prompts = BTreeMap::new();
        for l in &mc.lesions {
            if let Some(c) = l.baseline_prompt {
                baseline_prompts.insert(l.id, PromptPoint::new(c, PromptRole::Baseline, l.id));
            }
            if let Some(c) = l.followup_prompt {
                followup_prompts.insert(l.id, PromptPoint::new(c, PromptRole::Verified, l.id));
            }
        }
        for id in baseline.mask.instance_ids() {
            if !baseline_prompts.contains_key(&id) {
                return Err(Error::parse(&case_ctx, format!("lesion {id} has no baseline prompt")));
            }
        }
        let case = LongitudinalCase {
            case_id: mc.case_id.clone(),
            kind: mc.kind,
            baseline,
            followup,
            truth_field,
            baseline_prompts,
            followup_prompts,
        };
        case.validate().map_err(|e| match e {
            Error::Validation(m) | Error::Shape(m) => Error::parse(&case_ctx, m),
            other => other,
        })?;
        out.push(case);
    }
    Ok(out)
}
