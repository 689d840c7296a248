//! Batch-norm channel saliency: one forward/backward pass captures
//! `(γ, ∂L/∂γ, β)` per channel; values are ℓ2-normalized per layer and
//! combined into a score that ranks channels globally.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{LossKind, Mode, Tape, Target};
use crate::data::{shuffled_indices, Split};
use crate::error::{Error, Result};
use crate::netgraph::coupling::{build_coupling_groups, group_lookup, ChannelRef};
use crate::netgraph::{Network, Trace};
use crate::numfmt::sig9;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// `|∂L/∂γ̂ · γ̂| + λ·β̂`
    #[default]
    Gfbs,
    /// `|∂L/∂γ̂ · γ̂|`
    GammaOnly,
    /// `β̂`
    BetaOnly,
    /// Layer-normalized ℓ1 norm of each filter.
    L1Filter,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Criterion::Gfbs, Criterion::GammaOnly, Criterion::BetaOnly, Criterion::L1Filter];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Gfbs => "gfbs",
            Criterion::GammaOnly => "gamma_only",
            Criterion::BetaOnly => "beta_only",
            Criterion::L1Filter => "l1_filter",
        }
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown criterion `{s}` (gfbs, gamma_only, beta_only, l1_filter)")))
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_LAMBDA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub lambda: f64,
    /// Fraction of prunable channels to remove, in `(0, 1)`.
    pub tau: f64,
    pub criterion: Criterion,
    /// Samples in the saliency minibatch.
    pub batch_size: usize,
    pub min_keep: usize,
    pub seed: u64,
    /// Minibatches whose gradients are averaged; 1 uses a single batch.
    pub batches: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            lambda: DEFAULT_LAMBDA,
            tau: 0.5,
            criterion: Criterion::Gfbs,
            batch_size: 64,
            min_keep: 4,
            seed: 0,
            batches: 1,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if self.min_keep == 0 {
            return Err(Error::config("min_keep must be at least 1"));
        }
        if self.batch_size < 2 || self.batches == 0 {
            return Err(Error::config("saliency needs batch_size >= 2 and at least one batch"));
        }
        Ok(())
    }
}

/// Per-channel saliency data. Raw values are filled by [`capture`],
/// `*_n` by [`normalize_layerwise`], score and rank by [`score`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRecord {
    pub channel: ChannelRef,
    pub gamma: f64,
    pub grad_gamma: f64,
    pub beta: f64,
    pub gamma_n: f64,
    pub grad_gamma_n: f64,
    pub beta_n: f64,
    pub score: f64,
    pub group: usize,
    pub rank: usize,
    /// Whether the channel passes through a ReLU after batch norm.
    pub relu: bool,
    pub weight_l1: f64,
    pub weight_l1_n: f64,
}

impl SaliencyRecord {
    pub fn raw(channel: ChannelRef, gamma: f64, grad_gamma: f64, beta: f64) -> Self {
        SaliencyRecord {
            channel,
            gamma,
            grad_gamma,
            beta,
            gamma_n: 0.0,
            grad_gamma_n: 0.0,
            beta_n: 0.0,
            score: 0.0,
            group: 0,
            rank: 0,
            relu: true,
            weight_l1: 0.0,
            weight_l1_n: 0.0,
        }
    }
}

/// One train-mode forward/backward on `(batch, target)` with an optional
/// hook that can edit the tape (for example install gradient hooks)
/// before the backward pass. The network is only read: parameters and
/// running statistics are left exactly as they were.
pub fn capture_with<T: Scalar>(
    net: &Network<T>,
    batch: &Tensor<T>,
    target: &Target<T>,
    loss: LossKind,
    hook: impl FnOnce(&mut Tape<T>, &Trace<T>),
) -> Result<Vec<SaliencyRecord>> {
    let mut tape = Tape::new();
    let trace = net.forward(batch, Mode::Train, &mut tape)?;
    let (l, value) = tape.loss(trace.output, target, loss)?;
    if !value.is_finite() {
        return Err(Error::numeric("saliency probe loss is not finite"));
    }
    hook(&mut tape, &trace);
    tape.backward(l)?;

    let units = net.prunable_units();
    let mut records = Vec::new();
    for (layer, (unit, lt)) in units.iter().zip(&trace.layers).enumerate() {
        let norm = unit.params.norm()?;
        let grads = tape.grad_or_zeros(lt.gamma);
        let c = unit.params.out_channels();
        let per_filter = unit.params.weight.len() / c;
        for j in 0..c {
            let mut r = SaliencyRecord::raw(
                ChannelRef { layer, channel: j },
                norm.gamma.data()[j].as_f64(),
                grads[j].as_f64(),
                norm.beta.data()[j].as_f64(),
            );
            r.relu = unit.relu;
            r.weight_l1 = unit.params.weight.data()[j * per_filter..(j + 1) * per_filter].iter().map(|w| w.as_f64().abs()).sum();
            records.push(r);
        }
    }
    if records.iter().all(|r| r.gamma == 1.0 && r.beta == 0.0) {
        log::warn!("every batch-norm γ is 1 and β is 0: the network looks untrained");
    }
    Ok(records)
}

/// Captures raw `(γ, ∂L/∂γ, β)` for every prunable channel.
pub fn capture<T: Scalar>(net: &Network<T>, batch: &Tensor<T>, target: &Target<T>, loss: LossKind) -> Result<Vec<SaliencyRecord>> {
    capture_with(net, batch, target, loss, |_, _| {})
}

/// Averages `∂L/∂γ` over several minibatches.
pub fn capture_averaged<T: Scalar>(
    net: &Network<T>,
    batches: &[(Tensor<T>, Target<T>)],
    loss: LossKind,
) -> Result<Vec<SaliencyRecord>> {
    let (first, rest) = batches.split_first().ok_or_else(|| Error::config("no saliency batches"))?;
    let mut acc = capture(net, &first.0, &first.1, loss)?;
    for (x, y) in rest {
        for (a, r) in acc.iter_mut().zip(capture(net, x, y, loss)?) {
            a.grad_gamma += r.grad_gamma;
        }
    }
    let k = batches.len() as f64;
    acc.iter_mut().for_each(|r| r.grad_gamma /= k);
    Ok(acc)
}

fn l2_normalize(values: &[f64]) -> Vec<f64> {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        values.iter().map(|v| v / norm).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Divides each of γ, ∂L/∂γ, β and the filter ℓ1 norm by its own ℓ2 norm
/// within the layer. All-zero vectors stay zero.
pub fn normalize_layerwise(records: &mut [SaliencyRecord]) {
    let mut start = 0;
    while start < records.len() {
        let layer = records[start].channel.layer;
        let end = start + records[start..].iter().take_while(|r| r.channel.layer == layer).count();
        let chunk = &mut records[start..end];
        let col = |f: fn(&SaliencyRecord) -> f64| l2_normalize(&chunk.iter().map(f).collect::<Vec<_>>());
        let (g, gg, b, l1) = (col(|r| r.gamma), col(|r| r.grad_gamma), col(|r| r.beta), col(|r| r.weight_l1));
        for (i, r) in chunk.iter_mut().enumerate() {
            r.gamma_n = g[i];
            r.grad_gamma_n = gg[i];
            r.beta_n = b[i];
            r.weight_l1_n = l1[i];
        }
        start = end;
    }
}

/// Score of one normalized record. The β term is dropped for channels
/// without a following ReLU, where β cannot gate activation.
pub fn channel_score(r: &SaliencyRecord, criterion: Criterion, lambda: f64) -> f64 {
    let taylor = (r.grad_gamma_n * r.gamma_n).abs();
    match criterion {
        Criterion::Gfbs if r.relu => taylor + lambda * r.beta_n,
        Criterion::Gfbs | Criterion::GammaOnly => taylor,
        Criterion::BetaOnly => r.beta_n,
        Criterion::L1Filter => r.weight_l1_n,
    }
}

/// Ascending ranks of `scores`; ties go to the smaller key.
pub fn rank_ascending<K: Ord>(scores: &[f64], keys: &[K]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then_with(|| keys[a].cmp(&keys[b])));
    let mut rank = vec![0; scores.len()];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos;
    }
    rank
}

/// Scores every record and assigns global ascending ranks, ties broken
/// by `(layer, channel)`.
pub fn score(records: &mut [SaliencyRecord], criterion: Criterion, lambda: f64) {
    let scores: Vec<f64> = records.iter().map(|r| channel_score(r, criterion, lambda)).collect();
    let keys: Vec<ChannelRef> = records.iter().map(|r| r.channel).collect();
    let ranks = rank_ascending(&scores, &keys);
    for ((r, s), k) in records.iter_mut().zip(scores).zip(ranks) {
        r.score = s;
        r.rank = k;
    }
}

/// `cfg.batches` disjoint minibatches of `cfg.batch_size` samples drawn
/// from `split` in the order fixed by `cfg.seed`.
pub fn sample_batches<T: Scalar>(split: &Split<T>, cfg: &PruneConfig) -> Result<Vec<(Tensor<T>, Target<T>)>> {
    let need = cfg.batch_size * cfg.batches;
    if cfg.batch_size < 2 || cfg.batches == 0 || need > split.len() {
        return Err(Error::config(format!(
            "{} saliency batches of {} need {need} samples; the split has {}",
            cfg.batches,
            cfg.batch_size,
            split.len()
        )));
    }
    let order = shuffled_indices(split.len(), cfg.seed, 0);
    order[..need].chunks(cfg.batch_size).map(|idx| split.batch(idx)).collect()
}

/// Capture, group lookup, normalization and scoring in one call.
pub fn compute_saliency<T: Scalar>(
    net: &Network<T>,
    batches: &[(Tensor<T>, Target<T>)],
    loss: LossKind,
    cfg: &PruneConfig,
) -> Result<Vec<SaliencyRecord>> {
    if cfg.lambda < 0.0 || !cfg.lambda.is_finite() {
        return Err(Error::config("lambda must be finite and >= 0"));
    }
    let mut records = capture_averaged(net, batches, loss)?;
    let lookup = group_lookup(&build_coupling_groups(net)?, net.spec());
    for r in &mut records {
        r.group = lookup[r.channel.layer][r.channel.channel];
    }
    normalize_layerwise(&mut records);
    score(&mut records, cfg.criterion, cfg.lambda);
    Ok(records)
}

pub const CSV_HEADER: &str = "layer,channel,gamma,grad_gamma,beta,gamma_n,grad_gamma_n,beta_n,score,group,rank";

/// CSV dump, one row per channel, 9 significant digits, LF endings.
pub fn to_csv(records: &[SaliencyRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let nums = [r.gamma, r.grad_gamma, r.beta, r.gamma_n, r.grad_gamma_n, r.beta_n, r.score].map(sig9);
        out.push_str(&format!("{},{},{},{},{}\n", r.channel.layer, r.channel.channel, nums.join(","), r.group, r.rank));
    }
    out
}

#[derive(Deserialize)]
struct CsvRow {
    layer: usize,
    channel: usize,
    gamma: f64,
    grad_gamma: f64,
    beta: f64,
    gamma_n: f64,
    grad_gamma_n: f64,
    beta_n: f64,
    score: f64,
    group: usize,
    rank: usize,
}

/// Parses a saliency CSV. Columns not stored in the file (ReLU flag,
/// filter norms) come back as defaults.
pub fn from_csv(text: &str) -> Result<Vec<SaliencyRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::format(format!("saliency csv: {e}")))?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::format("saliency csv: unexpected header"));
    }
    let mut out = Vec::new();
    for row in reader.deserialize::<CsvRow>() {
        let row = row.map_err(|e| Error::format(format!("saliency csv: {e}")))?;
        let mut r = SaliencyRecord::raw(ChannelRef { layer: row.layer, channel: row.channel }, row.gamma, row.grad_gamma, row.beta);
        r.gamma_n = row.gamma_n;
        r.grad_gamma_n = row.grad_gamma_n;
        r.beta_n = row.beta_n;
        r.score = row.score;
        r.group = row.group;
        r.rank = row.rank;
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::format("saliency csv has no rows"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(layer: usize, channel: usize, g: f64, gg: f64, b: f64) -> SaliencyRecord {
        SaliencyRecord::raw(ChannelRef { layer, channel }, g, gg, b)
    }

    #[test]
    fn three_four_five() {
        let mut r = vec![rec(0, 0, 3.0, 0.0, 0.0), rec(0, 1, 4.0, 0.0, 0.0)];
        normalize_layerwise(&mut r);
        assert!((r[0].gamma_n - 0.6).abs() < 1e-15 && (r[1].gamma_n - 0.8).abs() < 1e-15);
        assert_eq!((r[0].beta_n, r[1].grad_gamma_n), (0.0, 0.0));
    }

    #[test]
    fn formula_arithmetic() {
        let mut r = rec(0, 0, 0.0, 0.0, 0.0);
        r.grad_gamma_n = 0.5;
        r.gamma_n = -0.4;
        r.beta_n = -0.2;
        assert!((channel_score(&r, Criterion::Gfbs, 0.05) - 0.19).abs() < 1e-15);
        r.relu = false;
        assert!((channel_score(&r, Criterion::Gfbs, 0.05) - 0.2).abs() < 1e-15);
        assert_eq!(channel_score(&r, Criterion::BetaOnly, 0.05), -0.2);
    }

    #[test]
    fn ties_break_by_index() {
        let keys = [ChannelRef { layer: 1, channel: 0 }, ChannelRef { layer: 0, channel: 3 }, ChannelRef { layer: 0, channel: 1 }];
        assert_eq!(rank_ascending(&[0.5, 0.5, 0.5], &keys), vec![2, 1, 0]);
        assert_eq!(rank_ascending(&[0.1, 0.5, -1.0], &keys), vec![1, 2, 0]);
    }

    #[test]
    fn csv_round_trip() {
        let mut r = vec![rec(0, 0, 1.5, -0.25, 0.1), rec(0, 1, 2.0, 0.5, -0.3), rec(1, 0, 0.7, 1e-9, 0.0)];
        normalize_layerwise(&mut r);
        score(&mut r, Criterion::Gfbs, 0.05);
        let text = to_csv(&r);
        assert!(text.starts_with(CSV_HEADER) && text.ends_with('\n') && !text.contains('\r'));
        let back = from_csv(&text).unwrap();
        assert_eq!(to_csv(&back), text);
        assert_eq!(back[2].rank, r[2].rank);
        assert!(matches!(from_csv("a,b\n1,2\n"), Err(Error::Format(_))));
    }

    #[test]
    fn config_validation() {
        assert!(PruneConfig::default().validate().is_ok());
        for bad in [
            PruneConfig { tau: 1.0, ..Default::default() },
            PruneConfig { tau: 0.0, ..Default::default() },
            PruneConfig { min_keep: 0, ..Default::default() },
            PruneConfig { lambda: -0.1, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        assert!("nope".parse::<Criterion>().is_err());
        assert_eq!("beta_only".parse::<Criterion>().unwrap(), Criterion::BetaOnly);
    }
}
