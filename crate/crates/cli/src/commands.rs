use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use serde_json::json;

use groundlab_core::dataset::Dataset;
use groundlab_core::evaluator::{evaluate, write_iou_dump, EvalReport};
use groundlab_core::experiment::{
    build_augmented, build_test_split, build_train_split, ExperimentConfig,
};
use groundlab_core::model::{GroundingModel, ModelParams};
use groundlab_core::trainer::{
    run_ablation_grid, train as train_model, AblationTable, FreshReal, TrainData, Variant,
};

use crate::{manifest, CliResult, Ctx, Failure};

pub const DATA_DIR: &str = "data";
pub const RUNS_DIR: &str = "runs";
pub const EVAL_DIR: &str = "eval";
pub const ABLATION_DIR: &str = "ablation";

/// One row of the images-per-category sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub images_per_category: usize,
    pub pool_samples: usize,
    pub seed: u64,
    pub report: EvalReport,
}

pub fn slug(v: Variant) -> &'static str {
    match v {
        Variant::Baseline => "baseline",
        Variant::Aug => "aug",
        Variant::Prior => "prior",
        Variant::Both => "both",
    }
}

fn variant_of(use_aug: bool, use_prior: bool) -> Variant {
    match (use_aug, use_prior) {
        (false, false) => Variant::Baseline,
        (true, false) => Variant::Aug,
        (false, true) => Variant::Prior,
        (true, true) => Variant::Both,
    }
}

fn rel(parts: &[&str]) -> PathBuf {
    parts.iter().collect()
}

fn save_split(ctx: &Ctx, d: &Dataset, stem: &str) -> anyhow::Result<Vec<PathBuf>> {
    d.save(&ctx.out.join(DATA_DIR), stem)
        .with_context(|| format!("writing {stem} split"))?;
    Ok(vec![
        rel(&[DATA_DIR, &format!("{stem}.scenes.jsonl")]),
        rel(&[DATA_DIR, &format!("{stem}.samples.jsonl")]),
    ])
}

fn load_split(ctx: &Ctx, stem: &str, hint: &str) -> anyhow::Result<Dataset> {
    let dir = ctx.out.join(DATA_DIR);
    Dataset::load(&dir, stem)
        .with_context(|| format!("loading {stem} split from {} (run `{hint}` first)", dir.display()))
}

/// Loads a split, or builds and saves it when absent.
fn load_or_build(
    ctx: &Ctx,
    stem: &str,
    build: impl FnOnce(&ExperimentConfig) -> groundlab_core::error::Result<Dataset>,
) -> anyhow::Result<Dataset> {
    let dir = ctx.out.join(DATA_DIR);
    if dir.join(format!("{stem}.samples.jsonl")).exists() {
        return load_split(ctx, stem, "synth");
    }
    let d = build(&ctx.config)?;
    save_split(ctx, &d, stem)?;
    Ok(d)
}

fn write_json<T: Serialize>(ctx: &Ctx, rel_path: &Path, value: &T) -> anyhow::Result<PathBuf> {
    let path = ctx.out.join(rel_path);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(rel_path.to_path_buf())
}

fn write_text(ctx: &Ctx, rel_path: &Path, text: &str) -> anyhow::Result<PathBuf> {
    let path = ctx.out.join(rel_path);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, text)?;
    Ok(rel_path.to_path_buf())
}

fn train_data(ctx: &Ctx, use_aug: bool) -> anyhow::Result<TrainData> {
    Ok(TrainData {
        real: load_split(ctx, "train", "synth")?,
        augmented: if use_aug {
            load_split(ctx, "aug", "augment")?
        } else {
            Dataset::default()
        },
        fresh: Some(FreshReal {
            seed: ctx.config.seed,
            margins: ctx.config.data.margins,
        }),
    })
}

pub fn synth(ctx: &Ctx) -> CliResult<()> {
    let (train, test) = if ctx.jobs > 1 {
        std::thread::scope(|s| {
            let t = s.spawn(|| build_train_split(&ctx.config));
            let test = build_test_split(&ctx.config);
            (t.join().expect("synth worker panicked"), test)
        })
    } else {
        (build_train_split(&ctx.config), build_test_split(&ctx.config))
    };
    let (train, test) = (train?, test?);
    let mut files = save_split(ctx, &train, "train")?;
    files.extend(save_split(ctx, &test, "test")?);
    let m = manifest::write(
        ctx,
        &files,
        json!({ "train_samples": train.len(), "test_samples": test.len() }),
    )?;
    println!(
        "synth: {} train / {} test samples -> {}",
        train.len(),
        test.len(),
        m.display()
    );
    Ok(())
}

pub fn augment(ctx: &Ctx) -> CliResult<()> {
    let aug = build_augmented(&ctx.config)?;
    let files = save_split(ctx, &aug, "aug")?;
    let mut per_category = serde_json::Map::new();
    for c in &ctx.config.data.augment.categories {
        let n = aug.scenes.iter().filter(|s| s.target_category == *c).count();
        per_category.insert(c.name().to_string(), json!(n));
    }
    let m = manifest::write(
        ctx,
        &files,
        json!({
            "images_per_category": ctx.config.data.augment.images_per_category,
            "scenes_per_category": per_category,
            "scenes": aug.scenes.len(),
            "samples": aug.len(),
        }),
    )?;
    println!(
        "augment: {} scenes, {} pseudo-queries -> {}",
        aug.scenes.len(),
        aug.len(),
        m.display()
    );
    Ok(())
}

fn run_name(v: Variant, seed: u64) -> String {
    format!("{}-s{seed}", slug(v))
}

pub fn train(ctx: &Ctx) -> CliResult<()> {
    let tc = &ctx.config.train;
    let data = train_data(ctx, tc.use_aug)?;
    let test = if tc.eval_every > 0 {
        Some(load_split(ctx, "test", "synth")?)
    } else {
        None
    };
    let variant = variant_of(tc.use_aug, tc.use_prior);
    let mut files = Vec::new();
    let mut runs = Vec::new();
    for &seed in &tc.seeds {
        let (params, log) = train_model(tc, &ctx.config.model, &data, test.as_ref(), seed, ctx.jobs)?;
        let name = run_name(variant, seed);
        let dir = rel(&[RUNS_DIR, &name]);
        params.save(&ctx.out.join(&dir), "params")?;
        files.push(dir.join("params.json"));
        files.push(dir.join("params.bin"));
        files.push(write_json(ctx, &dir.join("config.json"), &ctx.config)?);
        files.push(write_json(ctx, &dir.join("runlog.json"), &log)?);
        let last = log.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
        println!(
            "train {name}: {} steps, final loss {last:.4}, {:.1}s",
            log.steps, log.wall_time_s
        );
        runs.push(json!({ "run": name, "digest": params.digest(), "steps": log.steps }));
    }
    manifest::write(ctx, &files, json!({ "runs": runs }))?;
    Ok(())
}

fn list_runs(ctx: &Ctx) -> anyhow::Result<Vec<String>> {
    let dir = ctx.out.join(RUNS_DIR);
    let mut names: Vec<String> = fs::read_dir(&dir)
        .with_context(|| format!("listing {} (run `train` first)", dir.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("params.json").exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(anyhow!("no trained runs under {}", dir.display()));
    }
    Ok(names)
}

pub fn eval(ctx: &Ctx, dump_iou: bool) -> CliResult<()> {
    let test = load_split(ctx, "test", "synth")?;
    let mut files = Vec::new();
    let mut rows = Vec::new();
    for name in list_runs(ctx)? {
        let dir = ctx.out.join(RUNS_DIR).join(&name);
        let cfg: ExperimentConfig = serde_json::from_str(
            &fs::read_to_string(dir.join("config.json"))
                .with_context(|| format!("reading config of run {name}"))?,
        )?;
        let params = ModelParams::load(&dir, "params")?;
        if params.config() != &cfg.model {
            return Err(Failure::Runtime(anyhow!(
                "run {name}: checkpoint config differs from its config.json"
            )));
        }
        let model = GroundingModel::new(cfg.model.clone())?;
        let hash = groundlab_core::trainer::config_hash(&cfg.model, &cfg.train);
        let (report, results) = evaluate(&model, &params, &test, cfg.train.use_prior, &hash, ctx.jobs)?;
        files.push(write_json(ctx, &rel(&[EVAL_DIR, &format!("{name}.report.json")]), &report)?);
        files.push(write_text(
            ctx,
            &rel(&[EVAL_DIR, &format!("{name}.buckets.csv")]),
            &report.to_csv(),
        )?);
        files.push(write_text(
            ctx,
            &rel(&[EVAL_DIR, &format!("{name}.per_count.csv")]),
            &report.per_count_csv(),
        )?);
        if dump_iou {
            let p = rel(&[EVAL_DIR, &format!("{name}.iou.jsonl")]);
            write_iou_dump(&ctx.out.join(&p), &results)?;
            files.push(p);
        }
        println!(
            "eval {name}: accuracy {:.4} ({}/{}), mean IoU {:.4}",
            report.accuracy, report.correct, report.n, report.mean_iou
        );
        rows.push(json!({ "run": name, "accuracy": report.accuracy, "n": report.n }));
    }
    manifest::write(ctx, &files, json!({ "runs": rows }))?;
    Ok(())
}

pub fn ablate(ctx: &Ctx, sweep_images: &[usize]) -> CliResult<()> {
    let cfg = &ctx.config;
    let real = load_or_build(ctx, "train", build_train_split)?;
    let test = load_or_build(ctx, "test", build_test_split)?;
    let augmented = load_or_build(ctx, "aug", build_augmented)?;
    let data = TrainData {
        real,
        augmented,
        fresh: Some(FreshReal {
            seed: cfg.seed,
            margins: cfg.data.margins,
        }),
    };
    let mut files = Vec::new();
    let mut on_cell = |c: &groundlab_core::trainer::AblationCell| {
        println!(
            "ablate {:<8} seed {}: accuracy {:.4}, hard slice {}, {:.1}s",
            c.variant.label(),
            c.seed,
            c.report.accuracy,
            c.report
                .hard_slice
                .accuracy
                .map_or("n/a".to_string(), |a| format!("{a:.4}")),
            c.log.wall_time_s
        );
    };
    let table = run_ablation_grid(
        &cfg.train,
        &cfg.model,
        &data,
        &test,
        &Variant::ALL,
        &cfg.train.seeds,
        ctx.jobs,
        &mut on_cell,
    )?;
    files.push(write_json(ctx, &rel(&[ABLATION_DIR, "table.json"]), &table)?);
    files.push(write_text(ctx, &rel(&[ABLATION_DIR, "table.md"]), &table.markdown())?);

    let mut sweep = Vec::new();
    if let Some(&seed) = cfg.train.seeds.first() {
        for &n in sweep_images {
            let mut c = cfg.clone();
            c.data.augment.images_per_category = n;
            c.validate().map_err(|e| Failure::Config(e.to_string()))?;
            let pool = build_augmented(&c)?;
            let d = TrainData {
                augmented: pool,
                ..data.clone()
            };
            let t = run_ablation_grid(
                &c.train,
                &c.model,
                &d,
                &test,
                &[Variant::Both],
                &[seed],
                ctx.jobs,
                &mut |_| {},
            )?;
            let cell = t.cells.into_iter().next().expect("one cell");
            println!(
                "sweep images_per_category {n}: {} pseudo-queries, accuracy {:.4}",
                d.augmented.len(),
                cell.report.accuracy
            );
            sweep.push(SweepRow {
                images_per_category: n,
                pool_samples: d.augmented.len(),
                seed,
                report: cell.report,
            });
        }
        if !sweep.is_empty() {
            files.push(write_json(ctx, &rel(&[ABLATION_DIR, "sweep.json"]), &sweep)?);
        }
    }
    let rows: Vec<serde_json::Value> = Variant::ALL
        .iter()
        .map(|&v| json!({ "variant": slug(v), "cells": table.cells_of(v).count(), "mean_accuracy": table.mean_accuracy(v) }))
        .collect();
    manifest::write(
        ctx,
        &files,
        json!({ "rows": rows, "sweep_rows": sweep.len() }),
    )?;
    Ok(())
}

pub fn load_table(out: &Path) -> anyhow::Result<Option<AblationTable>> {
    let p = out.join(ABLATION_DIR).join("table.json");
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(&p)?)?))
}

pub fn load_sweep(out: &Path) -> anyhow::Result<Vec<SweepRow>> {
    let p = out.join(ABLATION_DIR).join("sweep.json");
    if !p.exists() {
        return Ok(Vec::new());
    }
    Ok(serde_json::from_str(&fs::read_to_string(&p)?)?)
}
