use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use longitrack_core::harness::{load_manifest, paradigm_prompt, run_ablation, save_manifest, EvalConfig, ExperimentSpec, Paradigm, Segmenter};
use longitrack_core::metrics::{score_lesion, MetricsReport, DEFAULT_BOOTSTRAP, DEFAULT_LDR_THRESHOLD};
use longitrack_core::net::{checkpoint, NetConfig};
use longitrack_core::nifti::{read_mask, write_field, write_mask};
use longitrack_core::registration::{propose_followup_prompt, AffineConfig, RegistrationConfig};
use longitrack_core::synth::{make_ambiguity_case, make_standard_case};
use longitrack_core::train::{fit, TrainConfig};
use longitrack_core::{InstanceMask, LongitudinalCase};

#[derive(Parser)]
#[command(name = "longitrack", version, about = "Verified longitudinal lesion tracking workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize longitudinal phantom cases as NIfTI files plus manifest.json.
    Generate {
        #[arg(long)]
        n_cases: usize,
        #[arg(long, value_parser = parse_shape, default_value = "32,32,32")]
        shape: [usize; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Extra cases with a confounding new lesion beside the tracked one.
        #[arg(long, default_value_t = 0)]
        ambiguity: usize,
        #[arg(long, default_value_t = 3)]
        max_lesions: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate baseline-to-follow-up fields and propose follow-up prompts.
    Register {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "truth")]
        method: Method,
        #[arg(long, default_value_t = 0.0)]
        error_vox: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; the log goes to stdout as JSON lines.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment every lesion and write one instance mask per case.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "verified")]
        paradigm: ParadigmArg,
        #[arg(long, value_enum, default_value = "truth")]
        method: Method,
        #[arg(long, default_value_t = 0.0)]
        error_vox: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted instance masks against ground truth.
    Evaluate {
        /// Directory of `<case_id>.nii.gz` instance masks.
        #[arg(long)]
        pred: PathBuf,
        /// Directory holding the ground-truth manifest.json.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        tolerance_mm: f64,
        #[arg(long, default_value_t = DEFAULT_LDR_THRESHOLD)]
        ldr_threshold: f64,
        #[arg(long, default_value_t = DEFAULT_BOOTSTRAP)]
        n_bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation grid and write results.json plus table.txt.
    Ablate {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the verification API.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, value_enum, default_value = "truth")]
        method: Method,
        #[arg(long, default_value_t = 0.0)]
        error_vox: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Truth,
    Affine,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParadigmArg {
    Automatic,
    Verified,
}

/// Contents of `train --config`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    net: NetConfig,
    train: TrainConfig,
}

#[derive(Serialize)]
struct ProposalRecord {
    case_id: String,
    lesion_id: u32,
    baseline_prompt: [i64; 3],
    proposed_prompt: [i64; 3],
    field: String,
    residual_error_vox: f64,
    converged: bool,
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    match parts[..] {
        [z, y, x] if z > 0 && y > 0 && x > 0 => Ok([z, y, x]),
        _ => Err(format!("expected three positive sizes Z,Y,X, got {s:?}")),
    }
}

fn registration(method: Method, error_vox: f64, seed: u64) -> RegistrationConfig {
    match method {
        Method::Truth => RegistrationConfig::Truth { error_vox, seed },
        Method::Affine => RegistrationConfig::Affine(AffineConfig::default()),
    }
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

fn load_cases(dir: &Path) -> Result<Vec<LongitudinalCase>> {
    load_manifest(&manifest_path(dir)).with_context(|| format!("loading cases from {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn generate(n_cases: usize, shape: [usize; 3], seed: u64, ambiguity: usize, max_lesions: usize, out: &Path) -> Result<()> {
    let mut cases = Vec::with_capacity(n_cases + ambiguity);
    for i in 0..n_cases + ambiguity {
        let s = seed + i as u64;
        let mut case = if i < n_cases { make_standard_case(s, shape, max_lesions)? } else { make_ambiguity_case(s, shape)? };
        case.case_id = format!("case_{i:04}");
        cases.push(case);
    }
    fs::create_dir_all(out)?;
    save_manifest(&cases, &manifest_path(out))?;
    log::info!("wrote {} cases to {}", cases.len(), out.display());
    Ok(())
}

fn register(data: &Path, reg: &RegistrationConfig, out: &Path) -> Result<()> {
    let cases = load_cases(data)?;
    fs::create_dir_all(out)?;
    let mut records = Vec::new();
    for case in &cases {
        let result = reg.register(case)?;
        let name = format!("{}_field.nii.gz", case.case_id);
        write_field(out.join(&name), &result.field, case.baseline.volume.spacing())?;
        for (&id, p0) in &case.baseline_prompts {
            records.push(ProposalRecord {
                case_id: case.case_id.clone(),
                lesion_id: id,
                baseline_prompt: p0.coord,
                proposed_prompt: propose_followup_prompt(case, id, &result)?.coord,
                field: name.clone(),
                residual_error_vox: result.residual_error_vox,
                converged: result.converged,
            });
        }
    }
    write_json(&out.join("proposals.json"), &records)
}

fn train(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let file: TrainFile = match config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainFile::default(),
    };
    let cases = load_cases(data)?;
    let output = fit(&cases, &file.net, &file.train)?;
    print!("{}", output.log.to_json_lines());
    let meta = serde_json::json!({ "train": file.train, "best_epoch": output.log.best_epoch, "best_val_dsc": output.log.best_val_dsc });
    checkpoint::save(&output.model, out, meta)?;
    Ok(())
}

fn predict(model: &Path, data: &Path, paradigm: Paradigm, reg: &RegistrationConfig, out: &Path) -> Result<()> {
    let (model, _) = checkpoint::load(model)?;
    let cases = load_cases(data)?;
    fs::create_dir_all(out)?;
    for case in &cases {
        let mut labels = InstanceMask::zeros(case.shape());
        for id in case.lesion_ids() {
            let pt = paradigm_prompt(case, id, paradigm, reg)?;
            let mask = model.segment(case, &case.baseline_prompts[&id], &pt)?;
            ndarray::Zip::from(labels.labels_mut()).and(&mask).for_each(|l, &m| {
                if m {
                    *l = id;
                }
            });
        }
        write_mask(out.join(format!("{}.nii.gz", case.case_id)), &labels, case.followup.volume.spacing())?;
    }
    Ok(())
}

fn evaluate(pred: &Path, gt: &Path, eval: &EvalConfig, out: &Path) -> Result<MetricsReport> {
    let cases = load_cases(gt)?;
    let mut records = Vec::new();
    for case in &cases {
        let path = pred.join(format!("{}.nii.gz", case.case_id));
        let labels = read_mask(&path).with_context(|| format!("prediction for {}", case.case_id))?;
        if labels.shape() != case.shape() {
            bail!("{} has shape {:?}, expected {:?}", path.display(), labels.shape(), case.shape());
        }
        for id in case.lesion_ids() {
            records.push(score_lesion(
                &case.case_id,
                id,
                &labels.binary(id),
                &case.followup.mask.binary(id),
                case.followup.volume.spacing(),
                eval.nsd_tolerance_mm,
                eval.ldr_threshold,
            )?);
        }
    }
    if records.is_empty() {
        bail!("no lesions to evaluate in {}", gt.display());
    }
    let report = MetricsReport::from_records(records, eval.nsd_tolerance_mm, eval.ldr_threshold, eval.n_bootstrap, eval.seed)?;
    write_json(out, &report)?;
    Ok(report)
}

fn ablate(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec: ExperimentSpec = match spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => ExperimentSpec::default(),
    };
    let table = run_ablation(&spec)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("results.json"), &table)?;
    let text = table.render();
    fs::write(out.join("table.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate { n_cases, shape, seed, ambiguity, max_lesions, out } => generate(n_cases, shape, seed, ambiguity, max_lesions, &out),
        Command::Register { data, method, error_vox, seed, out } => register(&data, &registration(method, error_vox, seed), &out),
        Command::Train { config, data, out } => train(config.as_deref(), &data, &out),
        Command::Predict { model, data, paradigm, method, error_vox, seed, out } => {
            let paradigm = match paradigm {
                ParadigmArg::Automatic => Paradigm::Automatic,
                ParadigmArg::Verified => Paradigm::Verified,
            };
            predict(&model, &data, paradigm, &registration(method, error_vox, seed), &out)
        }
        Command::Evaluate { pred, gt, tolerance_mm, ldr_threshold, n_bootstrap, seed, out } => {
            let eval = EvalConfig { nsd_tolerance_mm: tolerance_mm, ldr_threshold, n_bootstrap, seed };
            let report = evaluate(&pred, &gt, &eval, &out)?;
            println!("DSC  NSD  LDR\n{}", report.percent_row());
            Ok(())
        }
        Command::Ablate { spec, out } => ablate(spec.as_deref(), &out),
        Command::Serve { data, model, port, host, method, error_vox } => {
            let model = model.map(|p| checkpoint::load(&p).map(|(m, _)| m)).transpose()?;
            let state = longitrack_service::AppState::load(&data, model, registration(method, error_vox, 0))?;
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host/port")?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(longitrack_service::serve(state, addr))?;
            Ok(())
        }
    }
}
