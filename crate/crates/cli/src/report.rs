use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use serde_json::json;

use groundlab_core::evaluator::{EvalReport, Tally, BUCKETS};
use groundlab_core::trainer::{AblationTable, Variant};

use crate::commands::{load_sweep, load_table, slug, SweepRow, EVAL_DIR};
use crate::{manifest, CliResult, Ctx};

pub const REPORT_DIR: &str = "report";

fn pct(x: Option<f64>) -> String {
    x.map_or("n/a".to_string(), |a| format!("{:.2}", 100.0 * a))
}

fn csv_acc(x: Option<f64>) -> String {
    x.map(|a| format!("{a:.6}")).unwrap_or_default()
}

/// Sample-weighted mean accuracy and total count of several tallies.
fn pooled<'a>(tallies: impl Iterator<Item = &'a Tally>) -> (usize, Option<f64>) {
    let (mut n, mut correct) = (0, 0);
    for t in tallies {
        n += t.n;
        correct += t.correct;
    }
    (n, (n > 0).then(|| correct as f64 / n as f64))
}

fn bucket_labels() -> Vec<&'static str> {
    BUCKETS.iter().map(|b| b.0).collect()
}

/// (variant, [(bucket, n, accuracy)]) pooled over seeds.
fn figure1_rows(table: &AblationTable) -> Vec<(Variant, Vec<(String, usize, Option<f64>)>)> {
    Variant::ALL
        .iter()
        .filter(|&&v| table.cells_of(v).next().is_some())
        .map(|&v| {
            let rows = bucket_labels()
                .iter()
                .enumerate()
                .map(|(i, label)| {
                    let (n, acc) = pooled(table.cells_of(v).map(|c| &c.report.buckets[i].tally));
                    (label.to_string(), n, acc)
                })
                .collect();
            (v, rows)
        })
        .collect()
}

fn per_count_rows(table: &AblationTable, v: Variant) -> Vec<(usize, usize, Option<f64>)> {
    let max = table
        .cells_of(v)
        .flat_map(|c| c.report.per_count.iter().map(|r| r.distractors))
        .max();
    let Some(max) = max else { return Vec::new() };
    (0..=max)
        .map(|k| {
            let (n, acc) = pooled(
                table
                    .cells_of(v)
                    .flat_map(|c| c.report.per_count.iter().filter(move |r| r.distractors == k))
                    .map(|r| &r.tally),
            );
            (k, n, acc)
        })
        .filter(|r| r.1 > 0)
        .collect()
}

fn load_eval_reports(ctx: &Ctx) -> anyhow::Result<Vec<(String, EvalReport)>> {
    let dir = ctx.out.join(EVAL_DIR);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for e in fs::read_dir(&dir)? {
        let p = e?.path();
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(run) = name.strip_suffix(".report.json") {
            let r: EvalReport = serde_json::from_str(&fs::read_to_string(&p)?)
                .with_context(|| format!("parsing {}", p.display()))?;
            out.push((run.to_string(), r));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn sweep_markdown(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "| images per category | pseudo-queries | accuracy | relation | hard slice |\n|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            r.images_per_category,
            r.pool_samples,
            pct(Some(r.report.accuracy)),
            pct(r.report.relation_split.with_relation.accuracy),
            pct(r.report.hard_slice.accuracy)
        );
    }
    s
}

pub fn report(ctx: &Ctx) -> CliResult<()> {
    let table = load_table(&ctx.out)?;
    let sweep = load_sweep(&ctx.out)?;
    let evals = load_eval_reports(ctx)?;
    if table.is_none() && sweep.is_empty() && evals.is_empty() {
        return Err(anyhow!(
            "nothing to report under {} (run `ablate` or `eval` first)",
            ctx.out.display()
        )
        .into());
    }

    let mut md = String::from("# groundlab report\n\n");
    let mut fig1 = String::from("source,variant,bucket,n,accuracy\n");
    let mut fig1_counts = String::from("source,variant,distractors,n,accuracy\n");
    let mut fig3 = String::from("source,variant,part,n,accuracy\n");

    if let Some(t) = &table {
        md.push_str("## Ablation\n\nAccuracy in percent, mean over seeds.\n\n");
        md.push_str(&t.markdown());
        md.push_str("\n## Accuracy by distractor count\n\n");
        let labels = bucket_labels();
        let _ = writeln!(md, "| variant | {} |", labels.join(" | "));
        let _ = writeln!(md, "|---|{}", "---|".repeat(labels.len()));
        for (v, rows) in figure1_rows(t) {
            let cells: Vec<String> = rows
                .iter()
                .map(|(_, n, acc)| format!("{} (n={n})", pct(*acc)))
                .collect();
            let _ = writeln!(md, "| {} | {} |", v.label(), cells.join(" | "));
            for (b, n, acc) in &rows {
                let _ = writeln!(fig1, "ablation,{},{b},{n},{}", slug(v), csv_acc(*acc));
            }
            for (k, n, acc) in per_count_rows(t, v) {
                let _ = writeln!(fig1_counts, "ablation,{},{k},{n},{}", slug(v), csv_acc(acc));
            }
            let with = pooled(t.cells_of(v).map(|c| &c.report.relation_split.with_relation));
            let without = pooled(t.cells_of(v).map(|c| &c.report.relation_split.without_relation));
            let _ = writeln!(fig3, "ablation,{},without_relation,{},{}", slug(v), without.0, csv_acc(without.1));
            let _ = writeln!(fig3, "ablation,{},with_relation,{},{}", slug(v), with.0, csv_acc(with.1));
        }
    }

    if !sweep.is_empty() {
        md.push_str("\n## Images per category\n\nFull method, first seed.\n\n");
        md.push_str(&sweep_markdown(&sweep));
    }

    if !evals.is_empty() {
        md.push_str("\n## Evaluated runs\n\n| run | n | accuracy | mean IoU | relation | no relation |\n|---|---|---|---|---|---|\n");
        for (run, r) in &evals {
            let _ = writeln!(
                md,
                "| {run} | {} | {} | {:.4} | {} | {} |",
                r.n,
                pct(Some(r.accuracy)),
                r.mean_iou,
                pct(r.relation_split.with_relation.accuracy),
                pct(r.relation_split.without_relation.accuracy)
            );
            for b in &r.buckets {
                let _ = writeln!(fig1, "eval,{run},{},{},{}", b.bucket, b.tally.n, csv_acc(b.tally.accuracy));
            }
            for c in &r.per_count {
                let _ = writeln!(fig1_counts, "eval,{run},{},{},{}", c.distractors, c.tally.n, csv_acc(c.tally.accuracy));
            }
            let (w, wo) = (&r.relation_split.with_relation, &r.relation_split.without_relation);
            let _ = writeln!(fig3, "eval,{run},without_relation,{},{}", wo.n, csv_acc(wo.accuracy));
            let _ = writeln!(fig3, "eval,{run},with_relation,{},{}", w.n, csv_acc(w.accuracy));
        }
    }

    let mut table4 = String::from("images_per_category,pool_samples,accuracy,relation_accuracy,hard_accuracy\n");
    for r in &sweep {
        let _ = writeln!(
            table4,
            "{},{},{:.6},{},{}",
            r.images_per_category,
            r.pool_samples,
            r.report.accuracy,
            csv_acc(r.report.relation_split.with_relation.accuracy),
            csv_acc(r.report.hard_slice.accuracy)
        );
    }

    let dir = ctx.out.join(REPORT_DIR);
    fs::create_dir_all(&dir)?;
    let mut files: Vec<PathBuf> = Vec::new();
    for (name, body) in [
        ("summary.md", &md),
        ("figure1.csv", &fig1),
        ("figure1_per_count.csv", &fig1_counts),
        ("figure3.csv", &fig3),
        ("table4.csv", &table4),
    ] {
        fs::write(dir.join(name), body)?;
        files.push([REPORT_DIR, name].iter().collect());
    }
    manifest::write(
        ctx,
        &files,
        json!({
            "ablation_cells": table.as_ref().map_or(0, |t| t.cells.len()),
            "sweep_rows": sweep.len(),
            "eval_runs": evals.len(),
        }),
    )?;
    println!("report: {}", dir.join("summary.md").display());
    Ok(())
}
