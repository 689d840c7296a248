use std::fs;
use std::path::{Path, PathBuf};

use gfbs_core::data::{DataSpec, Dataset, Task};
use gfbs_core::netgraph::checkpoint::{decode, encode};
use gfbs_core::netgraph::{build_coupling_groups, count_flops, stored_dtype, FlopsReport, Network, NetworkSpec};
use gfbs_core::oracle::{self, bottom_k_overlap, oracle_delta_loss, spearman, structural_spot_check};
use gfbs_core::saliency::{self, compute_saliency, sample_batches, Criterion, PruneConfig, SaliencyRecord};
use gfbs_core::surgeon::{apply_prune, plan_prune, BudgetKind, PlanOptions, PrunePlan};
use gfbs_core::trainer::{self, evaluate, loss_for, EvalMetrics, History, SplitName, TrainConfig};
use gfbs_core::{DType, Error, Result, Scalar};
use serde::{Deserialize, Serialize};

use crate::manifest::{self, absolute, ManifestBuilder};
use crate::{report, Command, EvalArgs, OracleArgs, PruneArgs, RerunArgs, SaliencyArgs, TrainArgs};

macro_rules! with_dtype {
    ($dt:expr, $f:ident($($arg:expr),*)) => {
        match $dt {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a, false).map(drop),
        Command::Finetune(a) => train(a, true).map(drop),
        Command::Saliency(a) => saliency_cmd(a).map(drop),
        Command::Oracle(a) => oracle_cmd(a).map(drop),
        Command::Prune(a) => prune_cmd(a).map(drop),
        Command::Eval(a) => eval_cmd(a).map(drop),
        Command::Report(a) => report::run(a),
        Command::Rerun(a) => rerun(a),
    }
}

fn rerun(a: RerunArgs) -> Result<()> {
    let m = manifest::load(&a.manifest)?;
    let mut cmd = m.invocation;
    if let Some(out) = a.out {
        match &mut cmd {
            Command::Train(x) | Command::Finetune(x) => x.out = Some(out),
            Command::Saliency(x) => x.out = Some(out),
            Command::Oracle(x) => x.out = Some(out),
            Command::Prune(x) => x.out = Some(out),
            Command::Eval(x) => x.out = Some(out),
            Command::Report(x) => x.dir = out,
            Command::Rerun(_) => return Err(Error::config("a manifest cannot record a rerun")),
        }
    }
    log::info!("re-running `{}` recorded {}", m.command, m.started_at);
    run(cmd)
}

// ---------------------------------------------------------------- helpers

/// Creates the output directory and returns its absolute path.
fn out_dir(out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = absolute(&out.clone().unwrap_or_else(manifest::default_out_dir))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::config(format!("{flag} is required")))
}

/// Parses a dataset descriptor, making file paths absolute.
pub fn data_spec(desc: &str) -> Result<DataSpec> {
    let mut spec: DataSpec = desc.parse()?;
    if let DataSpec::Idx { train_images, train_labels, test_images, test_labels } = &mut spec {
        for p in [train_images, train_labels, test_images, test_labels] {
            *p = absolute(p)?;
        }
    }
    Ok(spec)
}

fn read_ckpt(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::config(format!("cannot read checkpoint {}: {e}", path.display())))
}

pub fn load_config(path: Option<&PathBuf>, task: Task, finetune: bool, epochs: Option<usize>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None if finetune => TrainConfig::finetune_for_task(task),
        None => TrainConfig::for_task(task),
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
        cfg.milestones.retain(|&m| m < e);
        cfg.eval_every = cfg.eval_every.min(e.max(1));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Classification { .. } => "accuracy",
        Task::Denoising { .. } => "psnr_db",
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v).map_err(|e| Error::format(e.to_string()))? + "\n")
}

// ---------------------------------------------------------- train/finetune

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub metric: String,
    pub epochs: usize,
    /// Test metrics before the first epoch (finetune only).
    pub start: Option<EvalMetrics>,
    pub train_loss: f64,
    pub train_metric: f64,
    pub test_loss: f64,
    pub test_metric: f64,
    pub best_epoch: Option<usize>,
    pub best_metric: f64,
    pub params: u64,
    pub flops: u64,
    pub elapsed_secs: f64,
}

pub fn train(a: TrainArgs, finetune: bool) -> Result<TrainSummary> {
    let out = out_dir(&a.out)?;
    let data = data_spec(&a.data)?;
    let mut resolved = a.clone();
    resolved.out = Some(out.clone());
    resolved.data = data.to_string();
    resolved.config = a.config.as_deref().map(absolute).transpose()?;
    let (source, dtype) = if finetune {
        if a.spec.is_some() {
            return Err(Error::config("finetune takes the architecture from --ckpt; drop --spec"));
        }
        let p = absolute(require(&a.ckpt, "--ckpt")?)?;
        resolved.ckpt = Some(p.clone());
        let bytes = read_ckpt(&p)?;
        let dt = a.dtype.unwrap_or(stored_dtype(&bytes)?);
        (Source::Ckpt(bytes), dt)
    } else {
        if a.ckpt.is_some() {
            return Err(Error::config("train starts from --spec; use finetune to continue a checkpoint"));
        }
        let p = absolute(require(&a.spec, "--spec")?)?;
        resolved.spec = Some(p.clone());
        let text = fs::read_to_string(&p).map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
        (Source::Spec(NetworkSpec::parse(&text)?), a.dtype.unwrap_or(DType::F32))
    };
    let name = if finetune { "finetune" } else { "train" };
    let invocation = if finetune { Command::Finetune(resolved.clone()) } else { Command::Train(resolved.clone()) };
    let mut mb = ManifestBuilder::new(name, invocation, &out);
    mb.config(resolved.config.as_ref());
    if !finetune {
        mb.seed("init", a.seed);
    }
    let summary = with_dtype!(dtype, train_typed(source, &data, &resolved, finetune, &mut mb))?;
    mb.finish()?;
    Ok(summary)
}

enum Source {
    Spec(NetworkSpec),
    Ckpt(Vec<u8>),
}

fn train_typed<T: Scalar>(
    source: Source,
    data: &DataSpec,
    a: &TrainArgs,
    finetune: bool,
    mb: &mut ManifestBuilder,
) -> Result<TrainSummary> {
    let mut net: Network<T> = match source {
        Source::Spec(spec) => Network::build(&spec, a.seed)?,
        Source::Ckpt(bytes) => decode(&bytes)?,
    };
    let ds: Dataset<T> = data.load()?;
    let cfg = load_config(a.config.as_ref(), ds.task, finetune, a.epochs)?;
    mb.seed("shuffle", cfg.seed);
    let start = if finetune { Some(evaluate(&net, &ds.test, ds.task, 100)?) } else { None };
    let history = trainer::train(&mut net, &ds, &cfg)?;
    mb.write("model.ckpt", encode(&net))?;
    mb.write("metrics.csv", history.to_csv())?;
    mb.write("config.json", json(&cfg)?)?;
    let summary = summarize(&net, &history, ds.task, cfg.epochs, start)?;
    mb.write("summary.json", json(&summary)?)?;
    log::info!("{}: test {} {:.4}", mb_name(finetune), summary.metric, summary.test_metric);
    Ok(summary)
}

fn mb_name(finetune: bool) -> &'static str {
    if finetune {
        "finetune"
    } else {
        "train"
    }
}

fn summarize<T: Scalar>(
    net: &Network<T>,
    h: &History<T>,
    task: Task,
    epochs: usize,
    start: Option<EvalMetrics>,
) -> Result<TrainSummary> {
    let tr = h.last(SplitName::Train);
    let te = h.last(SplitName::Test);
    let flops = count_flops(net)?;
    Ok(TrainSummary {
        metric: metric_name(task).into(),
        epochs,
        start,
        train_loss: tr.map_or(f64::NAN, |r| r.loss),
        train_metric: tr.map_or(f64::NAN, |r| r.metric),
        test_loss: te.map_or(f64::NAN, |r| r.loss),
        test_metric: te.map_or(f64::NAN, |r| r.metric),
        best_epoch: h.best_epoch,
        best_metric: h.best_metric,
        params: flops.total_params,
        flops: flops.total_flops,
        elapsed_secs: h.elapsed_secs,
    })
}

// ---------------------------------------------------------------- saliency

/// Contents of `saliency.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaliencyFile {
    pub config: PruneConfig,
    pub data: String,
    pub records: Vec<SaliencyRecord>,
}

pub fn saliency_cmd(a: SaliencyArgs) -> Result<SaliencyFile> {
    let out = out_dir(&a.out)?;
    let data = data_spec(&a.data)?;
    let mut resolved = a.clone();
    resolved.out = Some(out.clone());
    resolved.ckpt = absolute(&a.ckpt)?;
    resolved.data = data.to_string();
    let cfg = PruneConfig {
        lambda: a.lambda,
        criterion: a.criterion,
        batch_size: a.batch_size,
        seed: a.seed,
        batches: a.batches,
        ..PruneConfig::default()
    };
    let mut mb = ManifestBuilder::new("saliency", Command::Saliency(resolved.clone()), &out);
    mb.seed("batch", a.seed);
    // scored in double precision whatever the checkpoint's width
    let net: Network<f64> = decode(&read_ckpt(&resolved.ckpt)?)?;
    let ds: Dataset<f64> = data.load()?;
    let batches = sample_batches(&ds.train, &cfg)?;
    let records = compute_saliency(&net, &batches, loss_for(ds.task), &cfg)?;
    mb.write("saliency.csv", saliency::to_csv(&records))?;
    let file = SaliencyFile { config: cfg, data: resolved.data.clone(), records };
    mb.write("saliency.json", json(&file)?)?;
    mb.finish()?;
    log::info!("saliency: {} channels scored with {}", file.records.len(), file.config.criterion);
    Ok(file)
}

/// Reads `saliency.json`, or a CSV (with its sibling JSON for the config
/// when present).
fn load_saliency(path: &Path) -> Result<(Vec<SaliencyRecord>, Option<PruneConfig>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let f: SaliencyFile = serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        return Ok((f.records, Some(f.config)));
    }
    let records = saliency::from_csv(&text)?;
    let sibling = path.with_file_name("saliency.json");
    let cfg = match fs::read_to_string(&sibling) {
        Ok(t) => serde_json::from_str::<SaliencyFile>(&t).ok().map(|f| f.config),
        Err(_) => None,
    };
    Ok((records, cfg))
}

// ------------------------------------------------------------------ oracle

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleSummary {
    pub groups: usize,
    pub channels: usize,
    pub spot_check_max_abs_diff: f64,
    pub spearman: Option<f64>,
    /// Channels in both bottom-20% sets, and what random selection would give.
    pub bottom20_overlap: Option<usize>,
    pub bottom20_k: Option<usize>,
    pub bottom20_random_expectation: Option<f64>,
}

pub fn oracle_cmd(a: OracleArgs) -> Result<OracleSummary> {
    let out = out_dir(&a.out)?;
    let data = data_spec(&a.data)?;
    let mut resolved = a.clone();
    resolved.out = Some(out.clone());
    resolved.ckpt = absolute(&a.ckpt)?;
    resolved.data = data.to_string();
    resolved.saliency = a.saliency.as_deref().map(absolute).transpose()?;
    let mut mb = ManifestBuilder::new("oracle", Command::Oracle(resolved.clone()), &out);
    mb.seed("batch", a.seed);
    let net: Network<f64> = decode(&read_ckpt(&resolved.ckpt)?)?;
    let ds: Dataset<f64> = data.load()?;
    let cfg = PruneConfig { batch_size: a.batch_size, seed: a.seed, batches: 1, ..PruneConfig::default() };
    let (x, y) = sample_batches(&ds.train, &cfg)?.remove(0);
    let loss = loss_for(ds.task);
    let groups = build_coupling_groups(&net)?;
    let records = oracle_delta_loss(&net, &groups, &x, &y, loss)?;
    let spot = structural_spot_check(&net, &groups, &x, &y, loss, 5, a.seed)?;
    mb.write("oracle.csv", oracle::to_csv(&records))?;

    let mut summary = OracleSummary {
        groups: groups.len(),
        channels: records.iter().map(|r| r.members.len()).sum(),
        spot_check_max_abs_diff: spot.iter().map(|s| s.abs_diff()).fold(0.0, f64::max),
        spearman: None,
        bottom20_overlap: None,
        bottom20_k: None,
        bottom20_random_expectation: None,
    };
    if let Some(p) = &resolved.saliency {
        let (sal, _) = load_saliency(p)?;
        let mut delta = std::collections::HashMap::new();
        for r in &records {
            for m in &r.members {
                delta.insert(*m, r.delta_loss);
            }
        }
        let scores: Vec<f64> = sal.iter().map(|r| r.score).collect();
        let deltas = sal
            .iter()
            .map(|r| delta.get(&r.channel).copied().ok_or_else(|| Error::config(format!("saliency channel {:?} not in network", r.channel))))
            .collect::<Result<Vec<f64>>>()?;
        let n = scores.len();
        let k = (0.2 * n as f64).round() as usize;
        summary.spearman = Some(spearman(&scores, &deltas)?);
        summary.bottom20_overlap = Some(bottom_k_overlap(&scores, &deltas, k));
        summary.bottom20_k = Some(k);
        summary.bottom20_random_expectation = Some((k * k) as f64 / n as f64);
    }
    mb.write("oracle.json", json(&summary)?)?;
    mb.finish()?;
    if let Some(rho) = summary.spearman {
        log::info!("oracle: spearman {rho:.4}");
    }
    Ok(summary)
}

// ------------------------------------------------------------------- prune

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub before: FlopsReport,
    pub after: FlopsReport,
    pub flops_ratio: f64,
    pub param_ratio: f64,
}

pub fn prune_cmd(a: PruneArgs) -> Result<PrunePlan> {
    let out = out_dir(&a.out)?;
    let mut resolved = a.clone();
    resolved.out = Some(out.clone());
    resolved.ckpt = absolute(&a.ckpt)?;
    resolved.saliency = absolute(&a.saliency)?;
    let mut mb = ManifestBuilder::new("prune", Command::Prune(resolved.clone()), &out);
    let bytes = read_ckpt(&resolved.ckpt)?;
    let plan = with_dtype!(stored_dtype(&bytes)?, prune_typed(&bytes, &resolved, &mut mb))?;
    mb.finish()?;
    Ok(plan)
}

fn prune_typed<T: Scalar>(bytes: &[u8], a: &PruneArgs, mb: &mut ManifestBuilder) -> Result<PrunePlan> {
    let net: Network<T> = decode(bytes)?;
    let (mut records, cfg) = load_saliency(&a.saliency)?;
    let layers = net.spec().prunable_layers();
    for r in &mut records {
        let l = layers.get(r.channel.layer).ok_or_else(|| Error::config("saliency records do not match the checkpoint"))?;
        r.relu = l.relu;
    }
    let cfg = cfg.unwrap_or_default();
    let criterion = a.criterion.unwrap_or(cfg.criterion);
    let lambda = a.lambda.unwrap_or(cfg.lambda);
    if a.criterion.is_some() || a.lambda.is_some() {
        if criterion == Criterion::L1Filter && a.saliency.extension().is_none_or(|e| e != "json") {
            return Err(Error::config("l1_filter rescoring needs saliency.json (the CSV has no filter norms)"));
        }
        saliency::score(&mut records, criterion, lambda);
    }
    let groups = build_coupling_groups(&net)?;
    let opts = PlanOptions {
        tau: a.tau,
        min_keep: a.min_keep,
        budget: if a.flops { BudgetKind::Flops } else { BudgetKind::Channels },
        criterion,
        lambda,
    };
    let plan = plan_prune(net.spec(), &records, &groups, &opts)?;
    let pruned = apply_prune(&net, &plan)?;
    let (before, after) = (count_flops(&net)?, count_flops(&pruned)?);
    let fs = FlopsSummary { flops_ratio: after.ratio(&before), param_ratio: after.param_ratio(&before), before, after };
    mb.write("plan.json", plan.to_json())?;
    mb.write("pruned.ckpt", encode(&pruned))?;
    mb.write("flops.json", json(&fs)?)?;
    log::info!(
        "prune: removed {} channels ({:.1}%), FLOPs ratio {:.4}{}",
        plan.removed.len(),
        100.0 * plan.achieved_ratio,
        plan.flops_ratio,
        if plan.shortfall { " (budget not met)" } else { "" }
    );
    Ok(plan)
}

// -------------------------------------------------------------------- eval

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub metric: String,
    pub loss: f64,
    pub value: f64,
    pub samples: usize,
}

pub fn eval_cmd(a: EvalArgs) -> Result<EvalSummary> {
    let data = data_spec(&a.data)?;
    let bytes = read_ckpt(&a.ckpt)?;
    let summary = with_dtype!(stored_dtype(&bytes)?, eval_typed(&bytes, &data, a.batch_size))?;
    println!("{}", serde_json::to_string(&summary).map_err(|e| Error::format(e.to_string()))?);
    if a.out.is_some() {
        let out = out_dir(&a.out)?;
        let mut resolved = a.clone();
        resolved.out = Some(out.clone());
        resolved.ckpt = absolute(&a.ckpt)?;
        resolved.data = data.to_string();
        let mut mb = ManifestBuilder::new("eval", Command::Eval(resolved), &out);
        mb.write("eval.json", json(&summary)?)?;
        mb.finish()?;
    }
    Ok(summary)
}

fn eval_typed<T: Scalar>(bytes: &[u8], data: &DataSpec, batch_size: usize) -> Result<EvalSummary> {
    let net: Network<T> = decode(bytes)?;
    let ds: Dataset<T> = data.load()?;
    let m = evaluate(&net, &ds.test, ds.task, batch_size)?;
    Ok(EvalSummary { metric: metric_name(ds.task).into(), loss: m.loss, value: m.metric, samples: ds.test.len() })
}
