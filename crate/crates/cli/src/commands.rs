use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use f4d::evaluation::{evaluate_set, EvalConfig, MetricsReport};
use f4d::experiments::{
    ablation_matrix, format_ablation_table, run_ablation, write_ablation_csv, write_ablation_json,
    DEFAULT_DIRECTIONS, DEFAULT_FUSIONS,
};
use f4d::fusion::FusionMode;
use f4d::geometry::io::{save_mesh, write_vector_ply};
use f4d::losses::{Directions, FlowVariant};
use f4d::mesh_extraction::{extract_sequence, MiseConfig};
use f4d::model::{Model, SequenceModel};
use f4d::synthetic::io::{load_dataset, load_sequence, EXTENSION};
use f4d::synthetic::{DatasetSpec, PointCloudSequence, ShapeFamily, TemporalMode};
use f4d::trainer::{load_model, TrainConfig, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT};

use crate::config::{resolve, Override};
use crate::manifest::ManifestBuilder;
use crate::{AblateArgs, EvalArgs, GenDataArgs, OutArgs, ReconstructArgs, TrainArgs, UsageError};

pub const CACHE_ENV: &str = "F4D_CACHE";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Creates the output directory, refusing to touch an existing non-empty
/// one unless `--force` is given, in which case it is replaced.
fn prepare_out(out: &OutArgs) -> Result<()> {
    let path = &out.out;
    let occupied = path.is_file() || (path.is_dir() && fs::read_dir(path)?.next().is_some());
    if occupied {
        if !out.force {
            return Err(usage(format!(
                "{} already exists; pass --force to overwrite it",
                path.display()
            )));
        }
        if path.is_dir() {
            fs::remove_dir_all(path)?;
        } else {
            fs::remove_file(path)?;
        }
    }
    fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(())
}

fn parse_overrides(set: &[String]) -> Result<Vec<Override>> {
    Ok(set
        .iter()
        .map(|s| Override::parse(s))
        .collect::<Result<_, _>>()?)
}

fn parse_families(s: &str) -> Result<Vec<ShapeFamily>> {
    if s == "all" {
        return Ok(ShapeFamily::ALL.to_vec());
    }
    s.split(',')
        .map(|name| ShapeFamily::parse(name.trim()).map_err(|e| usage(e.to_string())))
        .collect()
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let spec = DatasetSpec {
        families: parse_families(&args.shapes)?,
        seqs_per_family: args.seqs,
        frames: args.frames,
        n_points: args.n,
        temporal_mode: TemporalMode::parse(&args.temporal).map_err(|e| usage(e.to_string()))?,
        noise_sigma: args.noise,
        seed: args.seed,
    };
    if spec.seqs_per_family == 0 {
        return Err(usage("--seqs must be positive"));
    }
    prepare_out(&args.out)?;
    let manifest = ManifestBuilder::start("gen-data", serde_json::to_value(&spec)?, spec.seed);
    let files = spec.generate(&args.out.out)?;
    manifest.finish(&args.out.out)?;
    println!(
        "wrote {} sequences to {}",
        files.len(),
        args.out.out.display()
    );
    Ok(())
}

/// Dataset directory from `--data`, or the default desk-scale dataset,
/// generated once into `$F4D_CACHE` (or the system temp directory).
fn dataset_dir(data: Option<&Path>) -> Result<PathBuf> {
    if let Some(dir) = data {
        if !dir.exists() {
            bail!("dataset {} does not exist", dir.display());
        }
        return Ok(dir.to_path_buf());
    }
    let root = std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("f4d-cache"));
    let spec = DatasetSpec::default();
    let key = hex::encode(&Sha256::digest(serde_json::to_vec(&spec)?)[..8]);
    let dir = root.join(format!("dataset-{key}"));
    if !dir.is_dir() {
        log::info!("generating the default dataset into {}", dir.display());
        let staging = root.join(format!(".dataset-{key}-{}", std::process::id()));
        spec.generate(&staging)?;
        fs::write(
            staging.join("spec.json"),
            serde_json::to_string_pretty(&spec)?,
        )?;
        if let Err(e) = fs::rename(&staging, &dir) {
            // another process may have finished first
            fs::remove_dir_all(&staging)?;
            if !dir.is_dir() {
                return Err(e.into());
            }
        }
    }
    Ok(dir)
}

fn load_sequences(path: &Path) -> Result<Vec<PointCloudSequence>> {
    if !path.exists() {
        bail!("{} does not exist", path.display());
    }
    let seqs = if path.is_file() {
        vec![load_sequence(path)?]
    } else {
        load_dataset(path)?
    };
    if seqs.is_empty() {
        bail!("no .{EXTENSION} sequences in {}", path.display());
    }
    Ok(seqs)
}

/// Holds out every 10th sequence; with fewer than 10 but at least two, the
/// last one.
pub fn split_validation(
    seqs: Vec<PointCloudSequence>,
) -> (Vec<PointCloudSequence>, Vec<PointCloudSequence>) {
    let n = seqs.len();
    let held = |i: usize| {
        if n >= 10 {
            i % 10 == 9
        } else {
            n >= 2 && i + 1 == n
        }
    };
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, s) in seqs.into_iter().enumerate() {
        if held(i) {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

fn train_and_val(
    data: Option<&Path>,
    val: Option<&Path>,
) -> Result<(PathBuf, Vec<PointCloudSequence>, Vec<PointCloudSequence>)> {
    let dir = dataset_dir(data)?;
    let all = load_sequences(&dir)?;
    let (train, val) = match val {
        Some(v) => (all, load_sequences(v)?),
        None => split_validation(all),
    };
    Ok((dir, train, val))
}

fn resolve_train_config(
    file: Option<&Path>,
    set: &[Override],
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let mut config: TrainConfig = resolve(file, set)?;
    if let Some(seed) = seed {
        config.seed = seed;
        config.eval.seed = seed;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let config = resolve_train_config(
        args.config.as_deref(),
        &parse_overrides(&args.set)?,
        args.seed,
    )?;
    let (data_dir, train_set, val_set) = train_and_val(args.data.as_deref(), args.val.as_deref())?;
    prepare_out(&args.out)?;
    let out = &args.out.out;
    let mut manifest = ManifestBuilder::start("train", serde_json::to_value(&config)?, config.seed);
    manifest.input(&data_dir);
    if let Some(v) = &args.val {
        manifest.input(v);
    }
    fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&config)?,
    )?;
    log::info!(
        "training on {} sequences, validating on {}, up to {} iterations",
        train_set.len(),
        val_set.len(),
        config.max_iters
    );
    let mut trainer = Trainer::new(config, train_set, val_set)?.with_output(out)?;
    if let Some(ckpt) = &args.resume {
        manifest.input(ckpt);
        trainer.resume(ckpt)?;
        log::info!("resumed at iteration {}", trainer.state.iteration);
    }
    let last = trainer.fit()?;
    if !out.join(BEST_CHECKPOINT).exists() {
        // without validations the final parameters are the selection
        fs::copy(out.join(LAST_CHECKPOINT), out.join(BEST_CHECKPOINT))?;
    }
    fs::write(
        out.join("state.json"),
        serde_json::to_string_pretty(&trainer.state)?,
    )?;
    manifest.finish(out)?;
    println!(
        "trained {} iterations, final loss {}, best IoU {}",
        trainer.state.iteration,
        last.map_or("n/a".into(), |r| format!("{:.6}", r.loss.total)),
        trainer
            .state
            .best_iou
            .map_or("n/a".into(), |v| format!("{v:.4}")),
    );
    Ok(())
}

/// A checkpoint file, or a run directory's best (else last) checkpoint.
pub fn checkpoint_path(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        for name in [BEST_CHECKPOINT, LAST_CHECKPOINT] {
            let p = path.join(name);
            if p.is_file() {
                return Ok(p);
            }
        }
        bail!("no checkpoint in {}", path.display());
    }
    if !path.is_file() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Ok(path.to_path_buf())
}

fn mise_from(res: &str, tau: f64) -> Result<MiseConfig> {
    let (start_res, upsample_steps) =
        MiseConfig::parse_resolution(res).map_err(|e| usage(e.to_string()))?;
    if start_res < 8 {
        return Err(usage("MISE start resolution must be at least 8"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(usage("--tau must be in (0, 1)"));
    }
    Ok(MiseConfig {
        start_res,
        upsample_steps,
        tau,
    })
}

fn export_flows(model: &Model, seq: &PointCloudSequence, dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let prepared = model.prepare(seq)?;
    for (t, frame) in seq.frames.iter().enumerate() {
        let file = fs::File::create(dir.join(format!("flow_{t:04}.ply")))?;
        write_vector_ply(
            &frame.points,
            model.flow(&prepared, t),
            std::io::BufWriter::new(file),
        )?;
    }
    Ok(seq.frames.len())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut config: EvalConfig = resolve(args.config.as_deref(), &parse_overrides(&args.set)?)?;
    if let Some(n) = args.samples {
        config.n_samples = n;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.res.is_some() || args.tau.is_some() {
        let res = args
            .res
            .clone()
            .unwrap_or_else(|| format!("{}x{}", config.mise.start_res, config.mise.upsample_steps));
        config.mise = mise_from(&res, args.tau.unwrap_or(config.mise.tau))?;
    }
    let ckpt = checkpoint_path(&args.checkpoint)?;
    let (model, _) = load_model(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let seqs = load_sequences(&args.data)?;
    prepare_out(&args.out)?;
    let out = &args.out.out;
    let mut manifest = ManifestBuilder::start("eval", serde_json::to_value(config)?, config.seed);
    manifest.input(&ckpt);
    manifest.input(&args.data);
    let report = MetricsReport::new(evaluate_set(&model, &seqs, &config)?, &config)?;
    report.write_json(&out.join("metrics.json"))?;
    report.write_csv(&out.join("metrics.csv"))?;
    if args.flow_export {
        for seq in &seqs {
            export_flows(&model, seq, &out.join("flow").join(&seq.id))?;
        }
    }
    for s in &report.sequences {
        for w in &s.warnings {
            log::warn!("{}: {w}", s.id);
        }
    }
    manifest.finish(out)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".into(), |x| format!("{x:.5}"));
    println!(
        "IoU {:.4}  Chamfer {}  Corres. {}  ({} sequences)",
        report.summary.iou,
        fmt(report.summary.chamfer),
        fmt(report.summary.correspondence),
        report.summary.sequences
    );
    Ok(())
}

pub fn reconstruct(args: ReconstructArgs) -> Result<()> {
    let mise = mise_from(&args.res, args.tau)?;
    let ckpt = checkpoint_path(&args.checkpoint)?;
    let (model, _) = load_model(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if !args.sequence.is_file() {
        bail!("sequence {} does not exist", args.sequence.display());
    }
    let seq = load_sequence(&args.sequence)?;
    prepare_out(&args.out)?;
    let out = &args.out.out;
    let mut manifest = ManifestBuilder::start("reconstruct", serde_json::to_value(mise)?, 0);
    manifest.input(&ckpt);
    manifest.input(&args.sequence);
    let extraction = extract_sequence(&model, &seq, &mise)?;
    for w in &extraction.warnings {
        log::warn!("{w}");
    }
    for (t, mesh) in extraction.meshes.iter().enumerate() {
        save_mesh(mesh, &out.join(format!("frame_{t:04}.{}", args.format)))?;
    }
    if args.flow_export {
        export_flows(&model, &seq, &out.join("flow"))?;
    }
    manifest.finish(out)?;
    println!(
        "wrote {} meshes to {}",
        extraction.meshes.len(),
        out.display()
    );
    Ok(())
}

/// Splits the matrix axes off the overrides. Each axis keeps its default
/// unless listed; listed flow variants are added to the Chamfer baseline.
pub fn matrix_axes(
    overrides: Vec<Override>,
) -> Result<(
    Vec<FusionMode>,
    Vec<FlowVariant>,
    Vec<Directions>,
    Vec<Override>,
)> {
    let mut fusions = DEFAULT_FUSIONS.to_vec();
    let mut variants = vec![FlowVariant::Chamfer];
    let mut directions = DEFAULT_DIRECTIONS.to_vec();
    let mut rest = Vec::new();
    for o in overrides {
        match o.key.as_str() {
            "fusion.mode" => fusions = parse_list(&o, FusionMode::parse)?,
            "loss.flow_variant" => {
                for v in parse_list(&o, FlowVariant::parse)? {
                    push_unique(&mut variants, v);
                }
            }
            "loss.directions" => directions = parse_list(&o, Directions::parse)?,
            _ => rest.push(o),
        }
    }
    if fusions.is_empty() || directions.is_empty() {
        return Err(usage("empty matrix axis"));
    }
    Ok((fusions, variants, directions, rest))
}

fn parse_list<T: PartialEq>(o: &Override, parse: fn(&str) -> f4d::Result<T>) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for item in o.list() {
        push_unique(&mut out, parse(&item).map_err(|e| usage(e.to_string()))?);
    }
    Ok(out)
}

fn push_unique<T: PartialEq>(v: &mut Vec<T>, x: T) {
    if !v.contains(&x) {
        v.push(x);
    }
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let (fusions, variants, directions, rest) = matrix_axes(parse_overrides(&args.set)?)?;
    let base = resolve_train_config(args.config.as_deref(), &rest, args.seed)?;
    let cells = ablation_matrix(&fusions, &variants, &directions);
    for c in &cells {
        c.apply(&base)
            .validate()
            .map_err(|e| usage(format!("{}: {e}", c.name())))?;
    }
    let (data_dir, train_set, mut eval_set) =
        train_and_val(args.data.as_deref(), args.val.as_deref())?;
    if eval_set.is_empty() {
        eval_set = train_set.clone();
    }
    prepare_out(&args.out)?;
    let out = &args.out.out;
    let mut manifest = ManifestBuilder::start(
        "ablate",
        serde_json::json!({ "base": base, "cells": cells }),
        base.seed,
    );
    manifest.input(&data_dir);
    log::info!(
        "{} cells, {} training and {} evaluation sequences",
        cells.len(),
        train_set.len(),
        eval_set.len()
    );
    let rows = run_ablation(
        &cells,
        &base,
        &train_set,
        &eval_set,
        &base.eval,
        |row| match &row.error {
            None => log::info!(
                "{}: IoU {:.4} in {:.1}s",
                row.cell.name(),
                row.iou.unwrap_or(f64::NAN),
                row.runtime_secs
            ),
            Some(e) => log::warn!("{} failed: {e}", row.cell.name()),
        },
    );
    write_ablation_csv(&rows, &out.join("ablation.csv"))?;
    write_ablation_json(&rows, &out.join("ablation.json"))?;
    let table = format_ablation_table(&rows);
    fs::write(out.join("ablation.txt"), &table)?;
    manifest.finish(out)?;
    print!("{table}");
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", rows.len());
    }
    Ok(())
}
