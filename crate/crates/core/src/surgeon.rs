//! Pruning plans and weight surgery.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::coupling::{group_lookup, ChannelRef, CouplingGroup, Topology};
use crate::netgraph::flops::count_flops_spec;
use crate::netgraph::{ConvUnit, Layer, Network, NetworkSpec, ParamSet};
use crate::saliency::{Criterion, PruneConfig, SaliencyRecord};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What the pruning budget limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    /// `tau` is the fraction of prunable channels to remove.
    #[default]
    Channels,
    /// `tau` is the fraction of FLOPs to remove.
    Flops,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub tau: f64,
    pub min_keep: usize,
    pub budget: BudgetKind,
    pub criterion: Criterion,
    pub lambda: f64,
}

impl PlanOptions {
    pub fn from_config(cfg: &PruneConfig) -> Self {
        PlanOptions { tau: cfg.tau, min_keep: cfg.min_keep, budget: BudgetKind::Channels, criterion: cfg.criterion, lambda: cfg.lambda }
    }

    pub fn flops(mut self, reduction: f64) -> Self {
        self.budget = BudgetKind::Flops;
        self.tau = reduction;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RemovedChannel {
    pub layer: usize,
    pub channel: usize,
    pub group: usize,
}

/// Channels to remove and the shapes that result. Serialized as JSON
/// with a fixed key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub spec_name: String,
    pub tau: f64,
    pub min_keep: usize,
    pub criterion: Criterion,
    pub lambda: f64,
    pub budget: BudgetKind,
    pub removed: Vec<RemovedChannel>,
    /// Sorted kept channel indices of every prunable layer.
    pub kept_per_layer: Vec<Vec<usize>>,
    /// Removed fraction of prunable channels.
    pub achieved_ratio: f64,
    /// Pruned FLOPs over original FLOPs.
    pub flops_ratio: f64,
    /// Set when min_keep or frozen channels stopped the budget being met.
    pub shortfall: bool,
    /// The pruned architecture in spec-file form.
    pub spec: String,
}

impl PrunePlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn removed_refs(&self) -> Vec<ChannelRef> {
        self.removed.iter().map(|r| ChannelRef { layer: r.layer, channel: r.channel }).collect()
    }
}

/// `spec` with every prunable layer narrowed to `counts[l]` channels.
pub fn pruned_spec(spec: &NetworkSpec, counts: &[usize]) -> Result<NetworkSpec> {
    let layers = spec.prunable_layers();
    if layers.len() != counts.len() {
        return Err(Error::config("channel counts do not match prunable layers"));
    }
    let mut out = spec.clone();
    for (l, &c) in layers.iter().zip(counts) {
        out.blocks[l.block].channels = c;
    }
    out.shapes()?;
    Ok(out)
}

fn flops_ratio(spec: &NetworkSpec, counts: &[usize], base: u64) -> Result<f64> {
    Ok(count_flops_spec(&pruned_spec(spec, counts)?)?.total_flops as f64 / base as f64)
}

/// Greedy global plan: groups are visited in ascending order of their
/// mean member score (ties by group id) and removed whole. A group is
/// skipped when it is frozen, when it would leave a layer with fewer than
/// `min_keep` channels, or (channel budget) when it would overshoot τ.
pub fn plan_prune(
    spec: &NetworkSpec,
    records: &[SaliencyRecord],
    groups: &[CouplingGroup],
    opts: &PlanOptions,
) -> Result<PrunePlan> {
    if !(opts.tau > 0.0 && opts.tau < 1.0) {
        return Err(Error::config(format!("tau must lie in (0, 1), got {}", opts.tau)));
    }
    if opts.min_keep == 0 {
        return Err(Error::config("min_keep must be at least 1"));
    }
    let layers = spec.prunable_layers();
    let mut score_of: HashMap<ChannelRef, f64> = HashMap::with_capacity(records.len());
    for r in records {
        score_of.insert(r.channel, r.score);
    }
    let total: usize = layers.iter().map(|l| l.channels).sum();
    if score_of.len() != total {
        return Err(Error::config(format!("{} saliency records for {total} prunable channels", score_of.len())));
    }
    let mut group_scores = Vec::with_capacity(groups.len());
    for g in groups {
        let mut sum = 0.0;
        for m in &g.members {
            sum += score_of.get(m).ok_or_else(|| Error::config(format!("no saliency record for {m:?}")))?;
        }
        group_scores.push(sum / g.members.len() as f64);
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| group_scores[a].total_cmp(&group_scores[b]).then(groups[a].id.cmp(&groups[b].id)));

    let base_flops = count_flops_spec(spec)?.total_flops;
    let budget = (opts.tau * total as f64 + 1e-9).floor() as usize;
    let mut counts: Vec<usize> = layers.iter().map(|l| l.channels).collect();
    let mut removed_flags: Vec<Vec<bool>> = layers.iter().map(|l| vec![false; l.channels]).collect();
    let mut removed = 0usize;
    let mut blocked = false;
    let mut current_ratio = 1.0;
    for gi in order {
        let done = match opts.budget {
            BudgetKind::Channels => removed >= budget,
            BudgetKind::Flops => current_ratio <= 1.0 - opts.tau,
        };
        if done {
            break;
        }
        let g = &groups[gi];
        if opts.budget == BudgetKind::Channels && removed + g.members.len() > budget {
            continue;
        }
        let mut per_layer: BTreeMap<usize, usize> = BTreeMap::new();
        for m in &g.members {
            *per_layer.entry(m.layer).or_default() += 1;
        }
        if g.frozen || per_layer.iter().any(|(&l, &k)| counts[l] < opts.min_keep + k) {
            blocked = true;
            continue;
        }
        for (&l, &k) in &per_layer {
            counts[l] -= k;
        }
        for m in &g.members {
            removed_flags[m.layer][m.channel] = true;
        }
        removed += g.members.len();
        if opts.budget == BudgetKind::Flops {
            current_ratio = flops_ratio(spec, &counts, base_flops)?;
        }
    }
    let shortfall = blocked
        && match opts.budget {
            BudgetKind::Channels => removed < budget,
            BudgetKind::Flops => current_ratio > 1.0 - opts.tau,
        };
    if shortfall {
        log::warn!("pruning budget not met: min_keep or frozen channels blocked further removal");
    }

    let lookup = group_lookup(groups, spec);
    let mut removed_list = Vec::with_capacity(removed);
    let mut kept_per_layer = Vec::with_capacity(layers.len());
    for (l, flags) in removed_flags.iter().enumerate() {
        let mut kept = Vec::new();
        for (j, &gone) in flags.iter().enumerate() {
            if gone {
                removed_list.push(RemovedChannel { layer: l, channel: j, group: lookup[l][j] });
            } else {
                kept.push(j);
            }
        }
        kept_per_layer.push(kept);
    }
    let new_spec = pruned_spec(spec, &counts)?;
    Ok(PrunePlan {
        spec_name: spec.name.clone(),
        tau: opts.tau,
        min_keep: opts.min_keep,
        criterion: opts.criterion,
        lambda: opts.lambda,
        budget: opts.budget,
        removed: removed_list,
        kept_per_layer,
        achieved_ratio: removed as f64 / total as f64,
        flops_ratio: count_flops_spec(&new_spec)?.total_flops as f64 / base_flops as f64,
        shortfall,
        spec: new_spec.to_text(),
    })
}

/// A plan that removes nothing.
pub fn empty_plan(spec: &NetworkSpec) -> Result<PrunePlan> {
    let layers = spec.prunable_layers();
    Ok(PrunePlan {
        spec_name: spec.name.clone(),
        tau: 0.0,
        min_keep: 1,
        criterion: Criterion::Gfbs,
        lambda: 0.0,
        budget: BudgetKind::Channels,
        removed: Vec::new(),
        kept_per_layer: layers.iter().map(|l| (0..l.channels).collect()).collect(),
        achieved_ratio: 0.0,
        flops_ratio: 1.0,
        shortfall: false,
        spec: spec.to_text(),
    })
}

/// Kept indices per channel class, checked for consistency.
fn class_keep(topo: &Topology, spec: &NetworkSpec, plan: &PrunePlan) -> Result<HashMap<usize, Vec<usize>>> {
    let layers = spec.prunable_layers();
    if plan.kept_per_layer.len() != layers.len() {
        return Err(Error::config("plan does not match the network's prunable layers"));
    }
    let mut keep: HashMap<usize, Vec<usize>> = HashMap::new();
    for (l, (layer, kept)) in layers.iter().zip(&plan.kept_per_layer).enumerate() {
        if kept.is_empty() || kept.windows(2).any(|w| w[0] >= w[1]) || kept.last().is_some_and(|&k| k >= layer.channels) {
            return Err(Error::config(format!("layer {l}: kept indices must be sorted, unique and in range")));
        }
        let class = topo.layer_class[l];
        match keep.get(&class) {
            Some(prev) if prev != kept => {
                return Err(Error::config(format!("layer {l}: kept channels differ from its coupled layers")));
            }
            _ => {
                keep.insert(class, kept.clone());
            }
        }
    }
    Ok(keep)
}

fn take<T: Scalar>(t: &Tensor<T>, keep: &[usize]) -> Tensor<T> {
    Tensor::new(vec![keep.len()], keep.iter().map(|&i| t.data()[i]).collect()).expect("non-empty selection")
}

fn slice_unit<T: Scalar>(u: &ConvUnit<T>, out_keep: &[usize], in_keep: &[usize]) -> ConvUnit<T> {
    let [_, ci, k, _] = u.params.weight.dims4().expect("4-d conv weight");
    let kk = k * k;
    let mut w = Vec::with_capacity(out_keep.len() * in_keep.len() * kk);
    for &o in out_keep {
        for &i in in_keep {
            let off = (o * ci + i) * kk;
            w.extend_from_slice(&u.params.weight.data()[off..off + kk]);
        }
    }
    let norm = u.params.norm.as_ref().map(|n| crate::netgraph::BatchNormParams {
        gamma: take(&n.gamma, out_keep),
        beta: take(&n.beta, out_keep),
        running_mean: take(&n.running_mean, out_keep),
        running_var: take(&n.running_var, out_keep),
        eps: n.eps,
        momentum: n.momentum,
    });
    ConvUnit {
        params: ParamSet {
            weight: Tensor::new(vec![out_keep.len(), in_keep.len(), k, k], w).expect("sliced conv weight"),
            bias: take(&u.params.bias, out_keep),
            norm,
        },
        stride: u.stride,
        padding: u.padding,
        relu: u.relu,
    }
}

/// Builds the pruned network described by `plan`. Conv filters are
/// sliced on both axes, batch-norm vectors and running statistics follow
/// their channels, linear inputs follow the flattened channel layout, and
/// coupled layers are sliced identically. The source is not modified.
pub fn apply_prune<T: Scalar>(net: &Network<T>, plan: &PrunePlan) -> Result<Network<T>> {
    let spec = net.spec();
    let topo = Topology::analyze(spec)?;
    let keep = class_keep(&topo, spec, plan)?;
    let counts: Vec<usize> = plan.kept_per_layer.iter().map(Vec::len).collect();
    let new_spec = pruned_spec(spec, &counts)?;
    let pick = |class: Option<usize>, full: usize| -> Vec<usize> {
        class.and_then(|c| keep.get(&c).cloned()).unwrap_or_else(|| (0..full).collect())
    };
    let mut layers = Vec::with_capacity(net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        let unit = |u: &ConvUnit<T>| {
            let [co, ci, _, _] = u.params.weight.dims4()?;
            Ok::<_, Error>(slice_unit(u, &pick(topo.block_output_class[i], co), &pick(topo.block_input_class[i], ci)))
        };
        layers.push(match layer {
            Layer::Conv(u) => Layer::Conv(unit(u)?),
            Layer::ResidualBegin(Some(u)) => Layer::ResidualBegin(Some(unit(u)?)),
            Layer::Linear { weight, bias } => {
                let [d, k] = weight.dims2()?;
                let rows: Vec<usize> = match topo.linear_origin[i] {
                    Some(o) => pick(Some(o.class), o.channels)
                        .into_iter()
                        .flat_map(|c| c * o.plane..(c + 1) * o.plane)
                        .collect(),
                    None => (0..d).collect(),
                };
                let mut w = Vec::with_capacity(rows.len() * k);
                for &r in &rows {
                    w.extend_from_slice(&weight.data()[r * k..(r + 1) * k]);
                }
                Layer::Linear { weight: Tensor::new(vec![rows.len(), k], w)?, bias: bias.clone() }
            }
            other => other.clone(),
        });
    }
    Network::from_parts(new_spec, layers)
}

/// Outcome of [`validate_plan`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub violations: Vec<String>,
}

impl PlanReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every structural invariant of `plan` against `net`.
pub fn validate_plan<T: Scalar>(net: &Network<T>, groups: &[CouplingGroup], plan: &PrunePlan) -> PlanReport {
    let mut v = Vec::new();
    let spec = net.spec();
    let layers = spec.prunable_layers();
    if plan.kept_per_layer.len() != layers.len() {
        v.push(format!("plan lists {} layers, network has {}", plan.kept_per_layer.len(), layers.len()));
        return PlanReport { violations: v };
    }
    let mut removed: Vec<Vec<bool>> = layers.iter().map(|l| vec![false; l.channels]).collect();
    for r in &plan.removed {
        match removed.get_mut(r.layer).and_then(|l| l.get_mut(r.channel)) {
            Some(flag) if !*flag => *flag = true,
            Some(_) => v.push(format!("channel ({}, {}) removed twice", r.layer, r.channel)),
            None => v.push(format!("removed channel ({}, {}) does not exist", r.layer, r.channel)),
        }
    }
    for (l, (layer, kept)) in layers.iter().zip(&plan.kept_per_layer).enumerate() {
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            v.push(format!("layer {l}: kept indices are not strictly ascending"));
        }
        let mut seen = vec![false; layer.channels];
        for &k in kept {
            match seen.get_mut(k) {
                Some(s) => *s = true,
                None => v.push(format!("layer {l}: kept channel {k} out of range")),
            }
        }
        for j in 0..layer.channels {
            if seen[j] == removed[l][j] {
                v.push(format!("layer {l}: channel {j} is {}", if seen[j] { "both kept and removed" } else { "neither kept nor removed" }));
            }
        }
        if kept.len() < plan.min_keep.max(1) {
            v.push(format!("layer {l}: layer collapse, {} channels kept (min_keep {})", kept.len(), plan.min_keep));
        }
    }
    let lookup = group_lookup(groups, spec);
    for g in groups {
        let gone = g.members.iter().filter(|m| removed.get(m.layer).and_then(|l| l.get(m.channel)) == Some(&true)).count();
        if gone != 0 && gone != g.members.len() {
            v.push(format!("coupling group {} split: {gone} of {} members removed", g.id, g.members.len()));
        }
        if gone != 0 && g.frozen {
            v.push(format!("coupling group {} is frozen but was removed", g.id));
        }
    }
    for r in &plan.removed {
        if lookup.get(r.layer).and_then(|l| l.get(r.channel)).is_some_and(|&g| g != r.group) {
            v.push(format!("channel ({}, {}) listed with group {}", r.layer, r.channel, r.group));
        }
    }
    let total: usize = layers.iter().map(|l| l.channels).sum();
    if plan.budget == BudgetKind::Channels && plan.removed.len() as f64 > plan.tau * total as f64 + 1e-9 {
        v.push(format!("removed {} of {total} channels, above tau {}", plan.removed.len(), plan.tau));
    }
    let counts: Vec<usize> = plan.kept_per_layer.iter().map(Vec::len).collect();
    match pruned_spec(spec, &counts) {
        Ok(s) if s.to_text() != plan.spec => v.push("plan spec does not match kept channel counts".into()),
        Ok(_) => {}
        Err(e) => v.push(format!("pruned spec is invalid: {e}")),
    }
    PlanReport { violations: v }
}

/// Copy of `net` with removed channels fully masked: `W`, `b`, γ and β
/// of each removed channel set to zero. Shapes are unchanged.
pub fn mask_channels<T: Scalar>(net: &Network<T>, removed: &[ChannelRef]) -> Result<Network<T>> {
    let mut out = net.clone();
    crate::oracle::zero_filter(&mut out, removed)?;
    crate::oracle::zero_gamma(&mut out, removed)?;
    let mut units = out.prunable_units_mut();
    for m in removed {
        units[m.layer].params.norm_mut()?.beta.data_mut()[m.channel] = T::zero();
    }
    Ok(out)
}
