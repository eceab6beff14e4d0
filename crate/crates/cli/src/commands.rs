use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use cunet_core::config::{DataSpec, ExperimentConfig};
use cunet_core::data::{extract_patches, synth_guided_dataset, SamplePair};
use cunet_core::io::{decode_pnm, encode_pnm, Checkpoint, CheckpointMeta};
use cunet_core::metrics::{psnr, rmse, ssim};
use cunet_core::model::{cunet_forward, decompose as split_components, init_params, CuNetParams, Task};
use cunet_core::rng::derive_seed;
use cunet_core::train::{train as run_epochs, EpochLog, TrainState};
use cunet_core::verify::{gradient_check, unrolled_equivalence, GradCheckConfig};
use cunet_core::{Precision, Real, Tensor};

use crate::error::{CliError, CliResult};
use crate::Common;

const EXPORT_MAXVAL: u16 = 65535;

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Degraded image, or the first source for fusion.
    #[arg(long)]
    pub input: PathBuf,
    /// Guidance image, or the second source for fusion.
    #[arg(long)]
    pub guide: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Prediction image, scored against `--target`.
    #[arg(long, requires = "target", conflicts_with = "checkpoint")]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub target: Option<PathBuf>,
    /// Model scored on the held-out split of the configured dataset.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory written by `synth-data`; its manifest replaces the configured dataset.
    #[arg(long, requires = "checkpoint")]
    pub dataset: Option<PathBuf>,
}

struct Loaded {
    cfg: ExperimentConfig,
    /// Whether the user named a task in the config file or an override.
    task_given: bool,
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn load_config(common: &Common) -> CliResult<Loaded> {
    let mut task_given = common.set.iter().any(|s| s.starts_with("model.task="));
    let mut cfg = match &common.config {
        Some(path) => {
            let text = read_text(path)?;
            let raw: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::new("E_CONFIG", format!("{}: {e}", path.display())))?;
            task_given |= raw.pointer("/model/task").is_some();
            ExperimentConfig::from_json(&text)
                .map_err(|e| CliError::new("E_CONFIG", format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    cfg = cfg.with_overrides(&common.set)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.data.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    if let Some(p) = common.precision {
        cfg.precision = p;
    }
    Ok(Loaded { cfg, task_given })
}

fn image_path(dir: &Path, stem: &str, channels: usize) -> PathBuf {
    dir.join(format!("{stem}.{}", if channels == 3 { "ppm" } else { "pgm" }))
}

fn load_image(path: &Path) -> CliResult<(Tensor<f64>, u16)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })
}

fn save_image<T: Real>(path: &Path, img: &Tensor<T>, maxval: u16) -> CliResult<()> {
    write_bytes(path, &encode_pnm(img, maxval)?)
}

fn load_checkpoint<T: Real>(path: &Path) -> CliResult<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Checkpoint::decode(&bytes)?)
}

fn check_task(loaded: &Loaded, found: Task) -> CliResult<()> {
    if loaded.task_given && loaded.cfg.model.task != found {
        return Err(CliError::task_mismatch(format!(
            "config expects a {} model but the checkpoint holds a {found} model",
            loaded.cfg.model.task
        )));
    }
    Ok(())
}

fn print_json(v: &impl Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

type Split = (Vec<SamplePair<f64>>, Vec<SamplePair<f64>>);

/// Training and held-out samples; sample `i` of the joint sequence is
/// seeded by `(seed, i)` so both splits regenerate exactly.
fn generate(spec: &DataSpec) -> CliResult<Split> {
    let mut all = synth_guided_dataset(spec.kind, spec.count + spec.val_count, spec.size, spec.seed)?;
    let val = all.split_off(spec.count);
    Ok((all, val))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    split: String,
    index: usize,
    seed: u64,
    x: String,
    y: String,
    z: String,
    /// Input samples outside `[0, 1]`, clamped in the exported file.
    clamped: usize,
    warning: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    spec: DataSpec,
    maxval: u16,
    samples: Vec<ManifestEntry>,
}

pub fn synth_data(common: &Common) -> CliResult<()> {
    let Loaded { cfg, .. } = load_config(common)?;
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out_dir);
    let (train, val) = generate(&cfg.data)?;
    let mut samples = Vec::with_capacity(train.len() + val.len());
    for (split, set, base) in [("train", &train, 0), ("val", &val, cfg.data.count)] {
        let dir = out.join(split);
        create_dir(&dir)?;
        for (n, s) in set.iter().enumerate() {
            let index = base + n;
            let mut names = Vec::with_capacity(3);
            for (part, img) in [("x", &s.x), ("y", &s.y), ("z", &s.z)] {
                let path = image_path(&dir, &format!("{index:05}_{part}"), img.channels());
                save_image(&path, img, EXPORT_MAXVAL)?;
                names.push(path.strip_prefix(&out).unwrap_or(&path).to_string_lossy().into_owned());
            }
            let clamped = s.x.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
            let [x, y, z]: [String; 3] = names.try_into().expect("three parts");
            samples.push(ManifestEntry {
                split: split.into(),
                index,
                seed: derive_seed(cfg.data.seed, index as u64),
                x,
                y,
                z,
                clamped,
                warning: s.warning.clone(),
            });
        }
    }
    let manifest = Manifest { spec: cfg.data.clone(), maxval: EXPORT_MAXVAL, samples };
    write_bytes(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    print_json(&json!({ "out": out, "train": train.len(), "val": val.len() }))
}

#[derive(Serialize)]
struct CsvRow {
    epoch: usize,
    lr: f64,
    train_loss: f64,
    val_psnr: Option<f64>,
}

impl From<&EpochLog> for CsvRow {
    fn from(l: &EpochLog) -> Self {
        Self { epoch: l.epoch, lr: l.lr, train_loss: l.train_loss, val_psnr: l.val_psnr }
    }
}

pub fn train(common: &Common) -> CliResult<()> {
    let Loaded { cfg, .. } = load_config(common)?;
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(&cfg),
        Precision::F64 => train_as::<f64>(&cfg),
    }
}

fn train_as<T: Real>(cfg: &ExperimentConfig) -> CliResult<()> {
    let out = PathBuf::from(&cfg.out_dir);
    create_dir(&out)?;
    write_bytes(&out.join("config.json"), cfg.to_canonical_json().as_bytes())?;
    let (train_raw, val_raw) = generate(&cfg.data)?;
    let mut train_set: Vec<SamplePair<T>> = Vec::new();
    for s in &train_raw {
        if cfg.data.size > cfg.train.patch {
            train_set.extend(extract_patches(&s.cast::<T>(), cfg.train.patch, cfg.train.stride)?);
        } else {
            train_set.push(s.cast());
        }
    }
    let val_set: Vec<SamplePair<T>> = val_raw.iter().map(|s| s.cast()).collect();
    let params: CuNetParams<T> = init_params(&cfg.model, cfg.train.seed)?;

    let log_path = out.join("train_log.csv");
    let ckpt_path = out.join("checkpoint.cun");
    let tmp_path = out.join("checkpoint.cun.tmp");
    let mut log = csv::Writer::from_path(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut io_failure: Option<CliError> = None;
    let result = run_epochs(&cfg.train, &train_set, &val_set, TrainState::new(params), |state| {
        let step = (|| -> CliResult<()> {
            let last = state.log.last().expect("one entry per finished epoch");
            log.serialize(CsvRow::from(last))?;
            log.flush().map_err(|e| CliError::io(&log_path, e))?;
            let ck = Checkpoint {
                params: state.params.clone(),
                adam: Some(state.adam.clone()),
                meta: CheckpointMeta {
                    epoch: state.epoch,
                    seed: cfg.train.seed,
                    loss_history: state.log.iter().map(|l| l.train_loss).collect(),
                },
            };
            write_bytes(&tmp_path, &ck.encode()?)?;
            fs::rename(&tmp_path, &ckpt_path).map_err(|e| CliError::io(&ckpt_path, e))?;
            eprintln!(
                "epoch {} lr {:e} loss {:.6} val_psnr {}",
                last.epoch,
                last.lr,
                last.train_loss,
                last.val_psnr.map_or("-".into(), |p| format!("{p:.3}"))
            );
            Ok(())
        })();
        step.map_err(|e| {
            let msg = e.to_string();
            io_failure = Some(e);
            cunet_core::Error::Contract(msg)
        })
    });
    if let Some(e) = io_failure {
        return Err(e);
    }
    let state = result?;
    let last = state.log.last();
    print_json(&json!({
        "epochs": state.epoch,
        "train_loss": last.map(|l| l.train_loss),
        "val_psnr": last.and_then(|l| l.val_psnr),
        "checkpoint": ckpt_path,
        "log": log_path,
    }))
}

/// Model, input, guide and the input's maxval.
type ForwardInputs<T> = (CuNetParams<T>, Tensor<T>, Tensor<T>, u16);

fn forward_inputs<T: Real>(loaded: &Loaded, args: &InferArgs) -> CliResult<ForwardInputs<T>> {
    let ck = load_checkpoint::<T>(&args.checkpoint)?;
    check_task(loaded, ck.params.config.task)?;
    let (x, maxval) = load_image(&args.input)?;
    let (y, _) = load_image(&args.guide)?;
    Ok((ck.params, x.cast(), y.cast(), maxval))
}

pub fn infer(common: &Common, args: &InferArgs) -> CliResult<()> {
    let loaded = load_config(common)?;
    match loaded.cfg.precision {
        Precision::F32 => infer_as::<f32>(&loaded, args),
        Precision::F64 => infer_as::<f64>(&loaded, args),
    }
}

fn infer_as<T: Real>(loaded: &Loaded, args: &InferArgs) -> CliResult<()> {
    let (params, x, y, maxval) = forward_inputs::<T>(loaded, args)?;
    let (z, _) = cunet_forward(&x, &y, &params)?;
    let out = PathBuf::from(&loaded.cfg.out_dir);
    create_dir(&out)?;
    let path = image_path(&out, "z", z.channels());
    save_image(&path, &z, maxval)?;
    print_json(&json!({ "z": path }))
}

pub fn decompose(common: &Common, args: &InferArgs) -> CliResult<()> {
    let loaded = load_config(common)?;
    match loaded.cfg.precision {
        Precision::F32 => decompose_as::<f32>(&loaded, args),
        Precision::F64 => decompose_as::<f64>(&loaded, args),
    }
}

fn decompose_as<T: Real>(loaded: &Loaded, args: &InferArgs) -> CliResult<()> {
    let (params, x, y, maxval) = forward_inputs::<T>(loaded, args)?;
    let (_, trace) = cunet_forward(&x, &y, &params)?;
    let parts = split_components(&trace)?;
    let residual = parts.component_sum()?.max_abs_diff(&parts.final_image)?.as_f64();
    let out = PathBuf::from(&loaded.cfg.out_dir);
    create_dir(&out)?;
    let mut files = serde_json::Map::new();
    for (name, img) in parts.named() {
        let path = image_path(&out, name, img.channels());
        save_image(&path, img, maxval)?;
        files.insert(name.into(), json!(path));
    }
    print_json(&json!({ "files": files, "sum_residual": residual }))
}

#[derive(Debug, Clone, Serialize)]
struct Scores {
    rmse: f64,
    psnr: f64,
    ssim: f64,
}

fn score<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> CliResult<Scores> {
    Ok(Scores { rmse: rmse(a, b)?, psnr: psnr(a, b)?, ssim: ssim(a, b)? })
}

fn mean(scores: &[Scores]) -> Scores {
    let n = scores.len().max(1) as f64;
    Scores {
        rmse: scores.iter().map(|s| s.rmse).sum::<f64>() / n,
        psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / n,
    }
}

pub fn eval(common: &Common, args: &EvalArgs) -> CliResult<()> {
    let mut loaded = load_config(common)?;
    let out = PathBuf::from(&loaded.cfg.out_dir);
    let report = if let (Some(pred), Some(target)) = (&args.pred, &args.target) {
        let (p, _) = load_image(pred)?;
        let (t, _) = load_image(target)?;
        let s = score(&p, &t)?;
        json!({ "samples": [s], "mean": s })
    } else if let Some(ckpt) = &args.checkpoint {
        if let Some(dir) = &args.dataset {
            let path = dir.join("manifest.json");
            let manifest: Manifest = serde_json::from_str(&read_text(&path)?)
                .map_err(|e| CliError::new("E_PARSE", format!("{}: {e}", path.display())))?;
            loaded.cfg.data = manifest.spec;
        }
        match loaded.cfg.precision {
            Precision::F32 => eval_model::<f32>(&loaded, ckpt)?,
            Precision::F64 => eval_model::<f64>(&loaded, ckpt)?,
        }
    } else {
        return Err(CliError::new("E_USAGE", "eval needs --pred and --target, or --checkpoint"));
    };
    create_dir(&out)?;
    write_bytes(&out.join("metrics.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    print_json(&report["mean"])
}

fn eval_model<T: Real>(loaded: &Loaded, ckpt: &Path) -> CliResult<Value> {
    let ck = load_checkpoint::<T>(ckpt)?;
    let task = ck.params.config.task;
    check_task(loaded, task)?;
    let spec = &loaded.cfg.data;
    if spec.kind.task() != task {
        return Err(CliError::task_mismatch(format!(
            "dataset {} needs a {} model, checkpoint holds {task}",
            spec.kind,
            spec.kind.task()
        )));
    }
    if spec.val_count == 0 {
        return Err(CliError::new("E_CONFIG", "data.val_count is 0, nothing to evaluate"));
    }
    let (_, val) = generate(spec)?;
    let mut samples = Vec::with_capacity(val.len());
    let mut model_scores = Vec::with_capacity(val.len());
    let mut input_scores = Vec::with_capacity(val.len());
    for (n, s) in val.iter().enumerate() {
        let s = s.cast::<T>();
        let (z, _) = cunet_forward(&s.x, &s.y, &ck.params)?;
        let m = score(&z, &s.z)?;
        let b = score(&s.x, &s.z)?;
        samples.push(json!({ "index": spec.count + n, "model": m, "input": b }));
        model_scores.push(m);
        input_scores.push(b);
    }
    Ok(json!({ "samples": samples, "mean": mean(&model_scores), "input_mean": mean(&input_scores) }))
}

pub fn oracle_check(common: &Common) -> CliResult<()> {
    let seed = common.seed.unwrap_or(0);
    let mut equivalence = Vec::new();
    let mut max_residual = 0.0f64;
    for blocks in [1, 3, 6] {
        let r = unrolled_equivalence(blocks, 2, 3, 1, 8, seed)?;
        max_residual = max_residual.max(r.max_gap());
        equivalence.push(r);
    }
    let mut gradients = Vec::new();
    let mut max_rel = 0.0f64;
    for task in [Task::Mir, Task::Mif] {
        let r = gradient_check(task, &GradCheckConfig::default(), seed)?;
        max_rel = max_rel.max(r.max_rel_error());
        gradients.push(r);
    }
    let passed = max_residual <= 1e-10 && max_rel < 1e-4;
    let report = json!({
        "seed": seed,
        "max_equivalence_residual": max_residual,
        "max_gradient_rel_error": max_rel,
        "passed": passed,
        "equivalence": equivalence,
        "gradients": gradients,
    });
    if let Some(out) = &common.out {
        create_dir(out)?;
        write_bytes(&out.join("oracle_check.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    println!("max equivalence residual {max_residual:e}");
    println!("max gradient relative error {max_rel:e}");
    if !passed {
        return Err(CliError::new(
            "E_ORACLE_FAILED",
            format!("equivalence residual {max_residual:e} (limit 1e-10), gradient error {max_rel:e} (limit 1e-4)"),
        ));
    }
    Ok(())
}
