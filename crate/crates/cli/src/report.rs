use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gfbs_core::numfmt::sig;
use gfbs_core::surgeon::{BudgetKind, PrunePlan};
use gfbs_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::commands::{self, EvalSummary, OracleSummary, SaliencyFile, TrainSummary};
use crate::manifest::{self, absolute, ManifestBuilder, RunManifest};
use crate::{Command, PruneArgs, ReportArgs, SaliencyArgs, TrainArgs};

pub const SWEEP_FILE: &str = "sweep.json";
pub const REPORT_FILE: &str = "report.md";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub removed: usize,
    pub achieved_ratio: f64,
    pub flops_ratio: f64,
    pub kept_per_layer: Vec<usize>,
    /// Test metric right after pruning, and after finetuning.
    pub pruned_metric: f64,
    pub finetuned_metric: f64,
    /// Channels removed by exactly one of this plan and the first λ's plan.
    pub removed_diff_vs_first: usize,
    /// γ, ∂L/∂γ and β match the first λ's records exactly, so the runs
    /// differ only through the λ·β term.
    pub raw_columns_identical: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sweep {
    pub metric: String,
    pub tau: f64,
    pub flops_budget: bool,
    pub rows: Vec<SweepRow>,
}

pub fn run(a: ReportArgs) -> Result<()> {
    let dir = absolute(&a.dir)?;
    fs::create_dir_all(&dir)?;
    if a.sweep {
        sweep(&a, &dir)?;
    }
    let text = render(&dir)?;
    fs::write(dir.join(REPORT_FILE), &text)?;
    log::info!("report written to {}", dir.join(REPORT_FILE).display());
    Ok(())
}

fn lambda_dir(l: f64) -> String {
    format!("lambda_{}", sig(l, 6))
}

fn sweep(a: &ReportArgs, dir: &Path) -> Result<()> {
    let ckpt = absolute(a.ckpt.as_ref().ok_or_else(|| Error::config("--sweep needs --ckpt"))?)?;
    let data = a.data.clone().ok_or_else(|| Error::config("--sweep needs --data"))?;
    if a.lambdas.is_empty() {
        return Err(Error::config("--lambdas is empty"));
    }
    let mut resolved = a.clone();
    resolved.dir = dir.to_path_buf();
    resolved.ckpt = Some(ckpt.clone());
    resolved.data = Some(commands::data_spec(&data)?.to_string());
    resolved.config = a.config.as_deref().map(absolute).transpose()?;
    let mut mb = ManifestBuilder::new("report", Command::Report(resolved.clone()), dir);
    mb.config(resolved.config.as_ref()).seed("batch", a.seed);

    let mut rows: Vec<SweepRow> = Vec::new();
    let mut first: Option<(SaliencyFile, PrunePlan)> = None;
    let mut metric = String::new();
    for &lambda in &a.lambdas {
        let base = dir.join(lambda_dir(lambda));
        log::info!("sweep: λ = {lambda}");
        let sal = commands::saliency_cmd(SaliencyArgs {
            ckpt: ckpt.clone(),
            data: data.clone(),
            lambda,
            batch_size: a.batch_size,
            criterion: gfbs_core::saliency::Criterion::Gfbs,
            seed: a.seed,
            batches: 1,
            out: Some(base.join("saliency")),
        })?;
        let plan = commands::prune_cmd(PruneArgs {
            ckpt: ckpt.clone(),
            saliency: base.join("saliency").join("saliency.json"),
            tau: a.tau,
            min_keep: a.min_keep,
            flops: a.flops,
            criterion: None,
            lambda: None,
            out: Some(base.join("prune")),
        })?;
        let ft = commands::train(
            TrainArgs {
                spec: None,
                ckpt: Some(base.join("prune").join("pruned.ckpt")),
                data: data.clone(),
                config: resolved.config.clone(),
                epochs: a.epochs,
                seed: 0,
                dtype: None,
                out: Some(base.join("finetune")),
            },
            true,
        )?;
        metric = ft.metric.clone();
        let (raw_same, diff) = match &first {
            None => (true, 0),
            Some((s0, p0)) => {
                let same = s0.records.len() == sal.records.len()
                    && s0.records.iter().zip(&sal.records).all(|(x, y)| {
                        x.channel == y.channel && x.gamma == y.gamma && x.grad_gamma == y.grad_gamma && x.beta == y.beta
                    });
                let a0: std::collections::BTreeSet<_> = p0.removed_refs().into_iter().collect();
                let a1: std::collections::BTreeSet<_> = plan.removed_refs().into_iter().collect();
                (same, a0.symmetric_difference(&a1).count())
            }
        };
        rows.push(SweepRow {
            lambda,
            removed: plan.removed.len(),
            achieved_ratio: plan.achieved_ratio,
            flops_ratio: plan.flops_ratio,
            kept_per_layer: plan.kept_per_layer.iter().map(Vec::len).collect(),
            pruned_metric: ft.start.map_or(f64::NAN, |m| m.metric),
            finetuned_metric: ft.test_metric,
            removed_diff_vs_first: diff,
            raw_columns_identical: raw_same,
        });
        if first.is_none() {
            first = Some((sal, plan));
        }
    }
    let sweep = Sweep { metric, tau: a.tau, flops_budget: a.flops, rows };
    mb.write(SWEEP_FILE, serde_json::to_string_pretty(&sweep).map_err(|e| Error::format(e.to_string()))? + "\n")?;
    mb.finish()?;
    Ok(())
}

fn find_manifests(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_manifests(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == manifest::FILE) {
            out.push(p);
        }
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<T> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

fn headline(m: &RunManifest) -> String {
    let d = &m.out_dir;
    match m.command.as_str() {
        "train" | "finetune" => read_json::<TrainSummary>(&d.join("summary.json"))
            .map(|s| format!("test {} {}", s.metric, sig(s.test_metric, 5)))
            .unwrap_or_default(),
        "eval" => read_json::<EvalSummary>(&d.join("eval.json")).map(|s| format!("{} {}", s.metric, sig(s.value, 5))).unwrap_or_default(),
        "oracle" => read_json::<OracleSummary>(&d.join("oracle.json"))
            .and_then(|s| s.spearman)
            .map(|r| format!("spearman {}", sig(r, 4)))
            .unwrap_or_default(),
        "prune" => fs::read_to_string(d.join("plan.json"))
            .ok()
            .and_then(|t| PrunePlan::from_json(&t).ok())
            .map(|p| format!("removed {}, FLOPs ratio {}", p.removed.len(), sig(p.flops_ratio, 4)))
            .unwrap_or_default(),
        "saliency" => "saliency.csv".into(),
        "report" => "λ sweep".into(),
        _ => String::new(),
    }
}

fn rel(base: &Path, p: &Path) -> String {
    let s = p.strip_prefix(base).unwrap_or(p).display().to_string();
    if s.is_empty() {
        ".".into()
    } else {
        s
    }
}

/// Markdown summary of every run found under `dir`.
pub fn render(dir: &Path) -> Result<String> {
    let mut manifests = Vec::new();
    find_manifests(dir, &mut manifests)?;
    let mut md = String::from("# Pruning report\n\n");
    let _ = writeln!(md, "Built from `gfbs {}` ({}).\n", env!("CARGO_PKG_VERSION"), env!("GFBS_GIT_DESCRIBE"));

    md.push_str("## Runs\n\n| directory | command | result |\n|---|---|---|\n");
    let mut loaded = Vec::new();
    for p in &manifests {
        let m = manifest::load(p)?;
        let _ = writeln!(md, "| {} | {} | {} |", rel(dir, &m.out_dir), m.command, headline(&m));
        loaded.push(m);
    }
    if loaded.is_empty() {
        md.push_str("| (none) | | |\n");
    }

    let plans: Vec<_> = loaded.iter().filter(|m| m.command == "prune").collect();
    if !plans.is_empty() {
        md.push_str("\n## Kept channels per layer\n");
        for m in plans {
            let Some(plan) = fs::read_to_string(m.out_dir.join("plan.json")).ok().and_then(|t| PrunePlan::from_json(&t).ok()) else {
                continue;
            };
            let total: usize = plan.kept_per_layer.iter().map(Vec::len).sum::<usize>() + plan.removed.len();
            let _ = writeln!(
                md,
                "\n### {}\n\ncriterion {}, λ = {}, τ = {} ({} budget), removed {} of {} channels, FLOPs ratio {}{}\n",
                rel(dir, &m.out_dir),
                plan.criterion,
                sig(plan.lambda, 6),
                sig(plan.tau, 6),
                match plan.budget {
                    BudgetKind::Channels => "channel",
                    BudgetKind::Flops => "FLOPs",
                },
                plan.removed.len(),
                total,
                sig(plan.flops_ratio, 4),
                if plan.shortfall { ", budget not met" } else { "" }
            );
            md.push_str("| layer | original | kept | pruned |\n|---:|---:|---:|---:|\n");
            for (l, kept) in plan.kept_per_layer.iter().enumerate() {
                let gone = plan.removed.iter().filter(|r| r.layer == l).count();
                let orig = kept.len() + gone;
                let _ = writeln!(md, "| {l} | {orig} | {} | {:.1}% |", kept.len(), 100.0 * gone as f64 / orig as f64);
            }
        }
    }

    for m in loaded.iter().filter(|m| m.command == "report") {
        let Some(sweep) = read_json::<Sweep>(&m.out_dir.join(SWEEP_FILE)) else { continue };
        let _ = writeln!(
            md,
            "\n## λ sweep ({})\n\nτ = {} ({} budget). Metric: {}.\n",
            rel(dir, &m.out_dir),
            sig(sweep.tau, 6),
            if sweep.flops_budget { "FLOPs" } else { "channel" },
            sweep.metric
        );
        md.push_str("| λ | removed | FLOPs ratio | after pruning | after finetune | Δ removed set vs first λ | raw γ, ∂γ, β identical |\n");
        md.push_str("|---:|---:|---:|---:|---:|---:|:---:|\n");
        for r in &sweep.rows {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} |",
                sig(r.lambda, 6),
                r.removed,
                sig(r.flops_ratio, 4),
                sig(r.pruned_metric, 5),
                sig(r.finetuned_metric, 5),
                r.removed_diff_vs_first,
                if r.raw_columns_identical { "yes" } else { "no" }
            );
        }
        let top = sweep.rows.iter().map(|r| r.finetuned_metric).fold(f64::NEG_INFINITY, f64::max);
        let best: Vec<String> = sweep.rows.iter().filter(|r| r.finetuned_metric == top).map(|r| sig(r.lambda, 6)).collect();
        if !best.is_empty() {
            let _ = writeln!(
                md,
                "\nBest after finetuning: λ = {}. At this scale the ordering is qualitative; differences within run-to-run noise are not meaningful.",
                best.join(", ")
            );
        }
        md.push_str("\nKept channels per layer:\n\n| layer |");
        for r in &sweep.rows {
            let _ = write!(md, " λ = {} |", sig(r.lambda, 6));
        }
        md.push_str("\n|---:|");
        md.push_str(&"---:|".repeat(sweep.rows.len()));
        md.push('\n');
        let layers = sweep.rows.first().map_or(0, |r| r.kept_per_layer.len());
        for l in 0..layers {
            let _ = write!(md, "| {l} |");
            for r in &sweep.rows {
                let _ = write!(md, " {} |", r.kept_per_layer[l]);
            }
            md.push('\n');
        }
    }
    Ok(md)
}
