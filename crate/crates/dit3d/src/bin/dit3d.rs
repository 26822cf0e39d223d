//! Command-line front end: dataset generation, training, sampling,
//! evaluation, and gradient verification.
//!
//! Every command writes its fully resolved configuration into its output
//! artifacts, so a run can be reproduced from the artifacts alone. Exit
//! codes: 0 success, 1 validation error, 2 runtime or numeric failure.

use clap::{Parser, Subcommand};
use dit3d::check;
use dit3d::data::{
    load_dataset, make_dataset, normalize_global, read_cloud, save_dataset, write_cloud,
    ShapeKind,
};
use dit3d::diffusion::{make_schedule, sample as sample_cloud};
use dit3d::error::{Error, Result};
use dit3d::finetune::{
    count_params, load_checkpoint, mark_trainable_efficient, mark_trainable_full,
    save_checkpoint, transfer_partial,
};
use dit3d::metrics::{coverage, distance_matrix, one_nna, DistKind};
use dit3d::model::{ModelConfig, NoisePredictor, SizeTag};
use dit3d::train::{train, TrainOptions};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "dit3d", version, about = "Voxelized diffusion transformer for point clouds")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shape dataset with a manifest.
    GenData {
        /// Comma-separated class names (sphere, box, torus, cylinder).
        #[arg(long, default_value = "sphere,box,torus,cylinder")]
        classes: String,
        #[arg(long, default_value_t = 32)]
        per_class: usize,
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for cloud files and manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a noise predictor on a generated dataset.
    Train {
        /// TOML run configuration; command-line flags win over it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest path (overrides the config file).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Start from an existing checkpoint instead of fresh weights.
        #[arg(long)]
        finetune_from: Option<PathBuf>,
        /// Train only scale factors, biases, and the class table.
        #[arg(long)]
        efficient: bool,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-epoch JSONL loss log (default: checkpoint path + .log.jsonl).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Draw point clouds from a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Class name or numeric id.
        #[arg(long)]
        class: String,
        /// Reverse steps; defaults to the training horizon.
        #[arg(long)]
        steps: Option<usize>,
        /// Classifier-free guidance weight; 0 disables the unconditional mix.
        #[arg(long, default_value_t = 0.0)]
        guidance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Points per cloud; defaults to the training cloud size.
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a generated set against a reference set.
    Eval {
        /// Directory of generated .xyz files.
        #[arg(long)]
        generated: PathBuf,
        /// Directory of reference .xyz files.
        #[arg(long)]
        reference: PathBuf,
        /// Comma-separated distances: cd, emd.
        #[arg(long, default_value = "cd")]
        metrics: String,
        /// Output report path (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against finite differences at 64 bits.
    Gradcheck {
        /// Also differentiate the full tiny model end to end.
        #[arg(long)]
        full_model: bool,
        /// Add a deliberately wrong gradient to prove the harness catches it.
        #[arg(long)]
        inject_fault: bool,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelSection,
    diffusion: DiffusionSection,
    train: TrainSection,
    sample: SampleSection,
    data: DataSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    size: String,
    v: usize,
    p: usize,
    r: usize,
    /// Block indices that use windowed attention; absent means the
    /// architecture default of every third block.
    window_blocks: Option<Vec<usize>>,
    depth: Option<usize>,
    d: Option<usize>,
    heads: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            size: "S".into(),
            v: 32,
            p: 4,
            r: 4,
            window_blocks: None,
            depth: None,
            d: None,
            heads: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DiffusionSection {
    t: usize,
    beta_start: f64,
    beta_end: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            t: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSection {
    lr: f64,
    batch_size: usize,
    epochs: usize,
    label_dropout: f64,
    seed: u64,
    early_stop_loss: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-4,
            batch_size: 16,
            epochs: 300,
            label_dropout: 0.1,
            seed: 0,
            early_stop_loss: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SampleSection {
    guidance: f64,
    steps: Option<usize>,
    points: Option<usize>,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            guidance: 0.0,
            steps: None,
            points: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct DataSection {
    manifest: Option<PathBuf>,
}

/// The hyperparameters the original experiments report, recorded in every
/// config echo so a desk-scale run is never mistaken for a full-scale one.
fn reference_defaults() -> serde_json::Value {
    json!({
        "size": "S", "v": 32, "p": 4, "r": 4,
        "t": 1000, "lr": 1e-4, "batch_size": 128
    })
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        }
    }
}

fn model_config(cfg: &RunConfig, num_classes: usize) -> Result<ModelConfig> {
    let m = &cfg.model;
    let tag = match m.size.as_str() {
        "S" => SizeTag::S,
        "B" => SizeTag::B,
        "L" => SizeTag::L,
        "XL" => SizeTag::XL,
        "custom" => SizeTag::Custom,
        other => {
            return Err(Error::Config(format!(
                "unknown model size '{other}' (expected S, B, L, XL, or custom)"
            )))
        }
    };
    let out = if tag == SizeTag::Custom {
        let need = |field: Option<usize>, name: &str| {
            field.ok_or_else(|| Error::Config(format!("custom size requires model.{name}")))
        };
        ModelConfig {
            size: SizeTag::Custom,
            depth: need(m.depth, "depth")?,
            d: need(m.d, "d")?,
            heads: need(m.heads, "heads")?,
            p: m.p,
            v: m.v,
            r: m.r,
            window_block_ids: m.window_blocks.clone().unwrap_or_default(),
            num_classes,
            t_max: cfg.diffusion.t,
        }
    } else {
        let mut c = ModelConfig::sized(tag, m.p, m.v, num_classes)?;
        c.r = m.r;
        if let Some(ids) = &m.window_blocks {
            c.window_block_ids = ids.clone();
        }
        c.t_max = cfg.diffusion.t;
        c
    };
    out.validate()?;
    Ok(out)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, text)?;
    Ok(())
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn cmd_gen_data(
    classes: &str,
    per_class: usize,
    points: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let kinds: Vec<ShapeKind> = classes
        .split(',')
        .map(|s| ShapeKind::from_name(s.trim()))
        .collect::<Result<_>>()?;
    let mut ds = make_dataset(&kinds, per_class, points, seed)?;
    let stats = normalize_global(&mut ds)?;
    let manifest = save_dataset(&ds, out)?;
    write_json(
        &out.join("run.json"),
        &json!({
            "command": "gen-data",
            "classes": kinds.iter().map(|k| k.name()).collect::<Vec<_>>(),
            "per_class": per_class,
            "points": points,
            "seed": seed,
            "out": out,
            "manifest": manifest,
            "norm": {"center": stats.center, "scale": stats.scale},
        }),
    )?;
    println!(
        "wrote {} clouds ({} train, {} test) to {}",
        ds.clouds.len(),
        ds.train.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<&Path>,
    dataset: Option<&Path>,
    out_checkpoint: &Path,
    finetune_from: Option<&Path>,
    efficient: bool,
    lr: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    seed: Option<u64>,
    log: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(v) = lr {
        cfg.train.lr = v;
    }
    if let Some(v) = batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = seed {
        cfg.train.seed = v;
    }
    if let Some(p) = dataset {
        cfg.data.manifest = Some(p.to_path_buf());
    }
    let manifest = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("no dataset: pass --dataset or set data.manifest".into()))?;

    let ds = load_dataset(&manifest)?;
    let clouds: Vec<Vec<[f32; 3]>> = ds
        .train
        .iter()
        .map(|&i| {
            ds.clouds[i]
                .iter()
                .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
                .collect()
        })
        .collect();
    let labels: Vec<usize> = ds.train.iter().map(|&i| ds.labels[i]).collect();

    let mcfg = model_config(&cfg, ds.num_classes())?;
    let mut model = NoisePredictor::<f32>::new(mcfg.clone(), cfg.train.seed)?;

    let transfer = match finetune_from {
        Some(src) => {
            let store = load_checkpoint(src)?;
            let report = transfer_partial(&store, &mut model, false)?;
            Some(json!({
                "from": src,
                "matched": report.matched.len(),
                "missing": report.missing,
                "shape_mismatch": report.shape_mismatch,
            }))
        }
        None => None,
    };
    if efficient {
        mark_trainable_efficient(&mut model);
    } else {
        mark_trainable_full(&mut model);
    }
    let total = count_params(&model, false);
    let trainable = count_params(&model, true);
    let fraction = trainable as f64 / total as f64;
    println!("trainable parameters: {trainable} of {total} ({:.4}%)", fraction * 100.0);

    let sched = make_schedule(cfg.diffusion.t, cfg.diffusion.beta_start, cfg.diffusion.beta_end)?;
    let opts = TrainOptions {
        lr: cfg.train.lr,
        batch_size: cfg.train.batch_size,
        epochs: cfg.train.epochs,
        label_dropout: cfg.train.label_dropout,
        seed: cfg.train.seed,
        early_stop_loss: cfg.train.early_stop_loss,
        max_steps: None,
    };

    let log_path = log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| with_suffix(out_checkpoint, ".log.jsonl"));
    let mut log_file = fs::File::create(&log_path)?;
    writeln!(
        log_file,
        "{}",
        json!({
            "event": "start",
            "trainable_params": trainable,
            "total_params": total,
            "trainable_fraction": fraction,
            "efficient": efficient,
        })
    )?;

    let started = Instant::now();
    let mut log_err = None;
    let stats = train(&mut model, &sched, &clouds, &labels, &opts, |epoch| {
        let line = serde_json::to_string(epoch).expect("epoch log serializes");
        if let Err(e) = writeln!(log_file, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let wall = started.elapsed().as_secs_f64();

    save_checkpoint(model.store(), out_checkpoint)?;
    let meta = json!({
        "command": "train",
        "config": cfg,
        "reference_defaults": reference_defaults(),
        "model": mcfg,
        "dataset": manifest,
        "class_names": ds.class_names,
        "points": ds.points,
        "norm": ds.norm,
        "transfer": transfer,
        "efficient": efficient,
        "trainable_params": trainable,
        "total_params": total,
        "trainable_fraction": fraction,
        "epochs_run": stats.epoch_losses.len(),
        "steps": stats.steps,
        "initial_loss": stats.epoch_losses.first(),
        "final_loss": stats.epoch_losses.last(),
        "stopped_early": stats.stopped_early,
        "wall_time_s": wall,
        "log": log_path,
    });
    write_json(&with_suffix(out_checkpoint, ".json"), &meta)?;
    println!(
        "trained {} epochs ({} steps) in {wall:.1} s; loss {:.4} -> {:.4}",
        stats.epoch_losses.len(),
        stats.steps,
        stats.epoch_losses.first().copied().unwrap_or(f64::NAN),
        stats.epoch_losses.last().copied().unwrap_or(f64::NAN),
    );
    println!("checkpoint: {}", out_checkpoint.display());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    checkpoint: &Path,
    count: usize,
    class: &str,
    steps: Option<usize>,
    guidance: f64,
    seed: u64,
    points: Option<usize>,
    out: &Path,
) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    let meta = read_json(&with_suffix(checkpoint, ".json"))?;
    let mcfg: ModelConfig = serde_json::from_value(meta["model"].clone())
        .map_err(|e| Error::Format(format!("checkpoint metadata lacks a model config: {e}")))?;
    let class_names: Vec<String> = serde_json::from_value(meta["class_names"].clone())
        .map_err(|e| Error::Format(format!("checkpoint metadata lacks class names: {e}")))?;
    let train_points = meta["points"].as_u64().unwrap_or(256) as usize;

    let class_id = match class.parse::<usize>() {
        Ok(id) => id,
        Err(_) => class_names
            .iter()
            .position(|n| n == class)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown class '{class}' (have: {})",
                    class_names.join(", ")
                ))
            })?,
    };
    if class_id >= mcfg.num_classes {
        return Err(Error::Config(format!(
            "class id {class_id} out of range for {} classes",
            mcfg.num_classes
        )));
    }

    let store = load_checkpoint(checkpoint)?;
    let mut model = NoisePredictor::<f32>::new(mcfg.clone(), 0)?;
    transfer_partial(&store, &mut model, true)?;

    let t = meta["config"]["diffusion"]["t"].as_u64().unwrap_or(1000) as usize;
    let beta_start = meta["config"]["diffusion"]["beta_start"]
        .as_f64()
        .unwrap_or(1e-4);
    let beta_end = meta["config"]["diffusion"]["beta_end"].as_f64().unwrap_or(0.02);
    let sched = make_schedule(t, beta_start, beta_end)?;
    let steps = steps.unwrap_or(t);
    let n = points.unwrap_or(train_points);

    fs::create_dir_all(out)?;
    let started = Instant::now();
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let cloud = sample_cloud(&sched, &model, n, Some(class_id), steps, guidance, seed + i as u64)?;
        let as64: Vec<[f64; 3]> = cloud
            .iter()
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect();
        let file = format!("sample_{i:04}.xyz");
        write_cloud(&as64, &out.join(&file))?;
        files.push(file);
    }
    let wall = started.elapsed().as_secs_f64();

    write_json(
        &out.join("run.json"),
        &json!({
            "command": "sample",
            "checkpoint": checkpoint,
            "count": count,
            "class": class_names[class_id],
            "class_id": class_id,
            "steps": steps,
            "guidance": guidance,
            "seed": seed,
            "points": n,
            "wall_time_s": wall,
            "files": files,
            "model": mcfg,
            "diffusion": {"t": t, "beta_start": beta_start, "beta_end": beta_end},
        }),
    )?;
    println!(
        "sampled {count} clouds of {n} points ({steps} steps) in {wall:.1} s to {}",
        out.display()
    );
    Ok(())
}

fn read_cloud_dir(dir: &Path) -> Result<Vec<Vec<[f64; 3]>>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "xyz"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Contract(format!(
            "no .xyz files in {}",
            dir.display()
        )));
    }
    names.iter().map(|p| read_cloud(p)).collect()
}

fn cmd_eval(generated: &Path, reference: &Path, metrics: &str, out: &Path) -> Result<()> {
    let kinds: Vec<DistKind> = metrics
        .split(',')
        .map(|m| match m.trim() {
            "cd" => Ok(DistKind::Chamfer),
            "emd" => Ok(DistKind::Emd),
            other => Err(Error::Config(format!(
                "unknown metric '{other}' (expected cd or emd)"
            ))),
        })
        .collect::<Result<_>>()?;
    let gen = read_cloud_dir(generated)?;
    let refc = read_cloud_dir(reference)?;

    let mut results = Vec::new();
    let mut degenerate = false;
    for kind in &kinds {
        let nna = one_nna(&gen, &refc, *kind)?;
        let cov = coverage(&gen, &refc, *kind)?;
        let cross = distance_matrix(&gen, &refc, *kind)?;
        if cross.iter().any(|&d| d == 0.0) {
            degenerate = true;
        }
        let tag = match kind {
            DistKind::Chamfer => "cd",
            DistKind::Emd => "emd",
        };
        println!("1-NNA[{tag}] = {nna:.2}%  COV[{tag}] = {cov:.2}%");
        results.push(json!({
            "distance": tag,
            "one_nna_percent": nna,
            "coverage_percent": cov,
        }));
    }
    if degenerate {
        println!("warning: generated and reference sets share identical clouds");
    }
    write_json(
        out,
        &json!({
            "command": "eval",
            "generated": generated,
            "reference": reference,
            "metrics": metrics,
            "generated_count": gen.len(),
            "reference_count": refc.len(),
            "results": results,
            "degenerate_overlap": degenerate,
        }),
    )?;
    println!("report: {}", out.display());
    Ok(())
}

fn cmd_gradcheck(full_model: bool, inject_fault: bool) -> Result<()> {
    println!(
        "{}",
        json!({
            "command": "gradcheck",
            "full_model": full_model,
            "inject_fault": inject_fault,
            "tolerance": check::GRADCHECK_TOL,
        })
    );
    let mut entries = check::op_suite()?;
    if full_model {
        entries.push(check::model_suite(31)?);
    }
    if inject_fault {
        entries.push(check::injected_fault()?);
    }
    let mut failed = Vec::new();
    for e in &entries {
        let verdict = if e.passes() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<16} max rel err {:.3e} over {} entries",
            e.name, e.report.max_rel_err, e.report.entries
        );
        if !e.passes() {
            failed.push(e.name.clone());
        }
    }
    if !failed.is_empty() {
        return Err(Error::Numeric(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )));
    }
    println!("all {} gradient checks passed", entries.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            classes,
            per_class,
            points,
            seed,
            out,
        } => cmd_gen_data(&classes, per_class, points, seed, &out),
        Cmd::Train {
            config,
            dataset,
            out_checkpoint,
            finetune_from,
            efficient,
            lr,
            batch_size,
            epochs,
            seed,
            log,
        } => cmd_train(
            config.as_deref(),
            dataset.as_deref(),
            &out_checkpoint,
            finetune_from.as_deref(),
            efficient,
            lr,
            batch_size,
            epochs,
            seed,
            log.as_deref(),
        ),
        Cmd::Sample {
            checkpoint,
            count,
            class,
            steps,
            guidance,
            seed,
            points,
            out,
        } => cmd_sample(
            &checkpoint,
            count,
            &class,
            steps,
            guidance,
            seed,
            points,
            &out,
        ),
        Cmd::Eval {
            generated,
            reference,
            metrics,
            out,
        } => cmd_eval(&generated, &reference, &metrics, &out),
        Cmd::Gradcheck {
            full_model,
            inject_fault,
        } => cmd_gradcheck(full_model, inject_fault),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(if e.is_validation() { 1 } else { 2 });
    }
}
