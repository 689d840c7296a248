mod common;

use common::{rng, uniform};
use gfbs_core::autograd::{LossKind, Mode, Target};
use gfbs_core::netgraph::checkpoint::{decode, encode};
use gfbs_core::netgraph::{build_coupling_groups, count_flops, Network, NetworkSpec};
use gfbs_core::saliency::{capture, SaliencyRecord};
use gfbs_core::surgeon::*;
use gfbs_core::Tensor;
use rand::Rng;

const PLAIN: &str = "input 2 8 8\nconv_bn_relu 8 3 1 1\nconv_bn_relu 8 3 1 1\ngap\nlinear 3\n";
const RESNET: &str = "input 2 8 8\nconv_bn_relu 6 3 1 1\nresidual_begin\nconv_bn_relu 4 3 1 1\nconv_bn 6 3 1 1\nresidual_add\npool 0 2 2\nconv_bn_relu 5 3 1 1\nflatten\nlinear 3\n";

/// Network with non-trivial running statistics.
fn net(text: &str, seed: u64) -> Network<f64> {
    let mut n = Network::build(&NetworkSpec::parse(text).unwrap(), seed).unwrap();
    let c = n.spec().input[0];
    for i in 0..3 {
        let x = uniform(&mut rng(seed * 10 + i), &[4, c, 8, 8]).map(|v| 1.5 * v + 0.3);
        n.forward_full(&x, Mode::Train, None).unwrap();
    }
    n
}

fn records(n: &Network<f64>, mut scores: impl FnMut(usize, usize) -> f64) -> Vec<SaliencyRecord> {
    let x = uniform(&mut rng(99), &[4, 2, 8, 8]);
    let mut recs = capture(n, &x, &Target::Labels(vec![0, 1, 2, 0]), LossKind::CrossEntropy).unwrap();
    for r in &mut recs {
        r.score = scores(r.channel.layer, r.channel.channel);
    }
    recs
}

fn opts(tau: f64, min_keep: usize) -> PlanOptions {
    PlanOptions { tau, min_keep, ..PlanOptions::from_config(&Default::default()) }
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn half_of_two_eight_channel_layers() {
    let n = net(PLAIN, 1);
    let groups = build_coupling_groups(&n).unwrap();
    let recs = records(&n, |l, c| (l * 8 + c) as f64);
    let plan = plan_prune(n.spec(), &recs, &groups, &opts(0.5, 4)).unwrap();
    assert_eq!(plan.removed.len(), 8);
    // layer 0 hits min_keep first; the planner skips its remaining channels
    // and continues into layer 1
    assert_eq!(plan.kept_per_layer, vec![vec![4, 5, 6, 7], vec![4, 5, 6, 7]]);
    assert!(!plan.shortfall);
    assert!(validate_plan(&n, &groups, &plan).passed());
    let pruned = apply_prune(&n, &plan).unwrap();
    assert_eq!(pruned.spec().prunable_layers().iter().map(|l| l.channels).collect::<Vec<_>>(), vec![4, 4]);

    let plan = plan_prune(n.spec(), &records(&n, |l, c| (l * 8 + c) as f64), &groups, &opts(0.6, 4)).unwrap();
    assert_eq!(plan.removed.len(), 8);
    assert!(plan.shortfall);
}

#[test]
fn min_keep_equal_to_width_blocks_everything() {
    let n = net(PLAIN, 2);
    let groups = build_coupling_groups(&n).unwrap();
    let plan = plan_prune(n.spec(), &records(&n, |_, c| c as f64), &groups, &opts(0.5, 8)).unwrap();
    assert!(plan.removed.is_empty());
    assert!(plan.shortfall);
    assert_eq!(plan.flops_ratio, 1.0);
}

#[test]
fn empty_plan_is_identity() {
    for text in [PLAIN, RESNET] {
        let n = net(text, 3);
        let pruned = apply_prune(&n, &empty_plan(n.spec()).unwrap()).unwrap();
        assert_eq!(pruned, n);
    }
}

#[test]
fn surgery_matches_masking() {
    for (text, seed) in [(PLAIN, 4), (RESNET, 5)] {
        let n = net(text, seed);
        let groups = build_coupling_groups(&n).unwrap();
        let x = uniform(&mut rng(seed + 50), &[3, 2, 8, 8]);
        let mut r = rng(seed);
        for _ in 0..10 {
            let recs = records(&n, |_, _| r.random::<f64>());
            let tau = r.random_range(0.1..0.7);
            let plan = plan_prune(n.spec(), &recs, &groups, &opts(tau, 1)).unwrap();
            assert!(validate_plan(&n, &groups, &plan).passed());
            let pruned = apply_prune(&n, &plan).unwrap();
            let masked = mask_channels(&n, &plan.removed_refs()).unwrap();
            let d = max_abs_diff(&pruned.predict(&x).unwrap(), &masked.predict(&x).unwrap());
            assert!(d <= 1e-10, "{text} tau {tau}: {d}");
        }
    }
}

#[test]
fn residual_groups_are_removed_whole() {
    let n = net(RESNET, 6);
    let groups = build_coupling_groups(&n).unwrap();
    assert!(groups.iter().any(|g| g.members.len() > 1));
    let plan = plan_prune(n.spec(), &records(&n, |l, c| (l + c) as f64), &groups, &opts(0.6, 1)).unwrap();
    let kept = &plan.kept_per_layer;
    // the stem and the block's last conv share one channel space
    assert_eq!(kept[0], kept[2]);
    assert!(validate_plan(&n, &groups, &plan).passed());
}

#[test]
fn pruned_parameter_count_is_analytic() {
    let n = net(PLAIN, 7);
    let groups = build_coupling_groups(&n).unwrap();
    let plan = plan_prune(n.spec(), &records(&n, |l, c| (c * 2 + l) as f64), &groups, &opts(0.5, 2)).unwrap();
    let pruned = apply_prune(&n, &plan).unwrap();
    let (a, b) = (plan.kept_per_layer[0].len(), plan.kept_per_layer[1].len());
    let conv = |cin: usize, c: usize| c * cin * 9 + c + 2 * c;
    let expected = conv(2, a) + conv(a, b) + 3 * b + 3;
    assert_eq!(pruned.param_count(), expected);
    assert_eq!(count_flops(&pruned).unwrap().total_params as usize, expected);
}

#[test]
fn validation_flags_collapse_and_split_groups() {
    let n = net(RESNET, 8);
    let groups = build_coupling_groups(&n).unwrap();
    let mut plan = empty_plan(n.spec()).unwrap();
    plan.tau = 0.9;
    plan.min_keep = 1;
    // drop every channel of the middle conv
    plan.removed = (0..4).map(|c| RemovedChannel { layer: 1, channel: c, group: groups.iter().find(|g| g.members.contains(&gfbs_core::netgraph::ChannelRef { layer: 1, channel: c })).unwrap().id }).collect();
    plan.kept_per_layer[1].clear();
    let report = validate_plan(&n, &groups, &plan);
    assert!(report.violations.iter().any(|v| v.contains("collapse")), "{report:?}");

    let mut plan = empty_plan(n.spec()).unwrap();
    plan.tau = 0.9;
    let g = groups.iter().find(|g| g.members.len() > 1 && !g.frozen).unwrap();
    let m = g.members[0];
    plan.removed = vec![RemovedChannel { layer: m.layer, channel: m.channel, group: g.id }];
    plan.kept_per_layer[m.layer].retain(|&c| c != m.channel);
    let report = validate_plan(&n, &groups, &plan);
    assert!(report.violations.iter().any(|v| v.contains("split")), "{report:?}");
    assert!(apply_prune(&n, &plan).is_err());
}

#[test]
fn greedy_plans_are_nested_on_plain_chains() {
    let n = net(PLAIN, 9);
    let groups = build_coupling_groups(&n).unwrap();
    let mut r = rng(9);
    let recs = records(&n, |_, _| r.random::<f64>());
    let mut prev: Vec<RemovedChannel> = Vec::new();
    for tau in [0.1, 0.2, 0.3, 0.5, 0.7] {
        let plan = plan_prune(n.spec(), &recs, &groups, &opts(tau, 2)).unwrap();
        assert!(prev.iter().all(|c| plan.removed.contains(c)), "tau {tau}");
        assert!(plan.removed.len() >= prev.len());
        prev = plan.removed;
    }
}

#[test]
fn flops_budget_reaches_target() {
    let n = net(PLAIN, 10);
    let groups = build_coupling_groups(&n).unwrap();
    let recs = records(&n, |l, c| (c * 2 + l) as f64);
    let plan = plan_prune(n.spec(), &recs, &groups, &opts(0.5, 1).flops(0.5)).unwrap();
    assert!(plan.flops_ratio <= 0.5 && !plan.shortfall);
    let pruned = apply_prune(&n, &plan).unwrap();
    let ratio = count_flops(&pruned).unwrap().ratio(&count_flops(&n).unwrap());
    assert_eq!(ratio, plan.flops_ratio);
    assert!(validate_plan(&n, &groups, &plan).passed());
}

#[test]
fn pruned_checkpoint_and_plan_round_trip() {
    let n = net(RESNET, 11);
    let groups = build_coupling_groups(&n).unwrap();
    let plan = plan_prune(n.spec(), &records(&n, |l, c| (l * 7 + c * 3 % 5) as f64), &groups, &opts(0.4, 2)).unwrap();
    assert_eq!(PrunePlan::from_json(&plan.to_json()).unwrap(), plan);
    let pruned = apply_prune(&n, &plan).unwrap();
    let bytes = encode(&pruned);
    let back: Network<f64> = decode(&bytes).unwrap();
    assert_eq!(back, pruned);
    assert_eq!(back.spec().to_text(), plan.spec);
}

#[test]
fn bad_options_are_rejected() {
    let n = net(PLAIN, 12);
    let groups = build_coupling_groups(&n).unwrap();
    let recs = records(&n, |_, c| c as f64);
    assert!(plan_prune(n.spec(), &recs, &groups, &opts(0.0, 1)).is_err());
    assert!(plan_prune(n.spec(), &recs, &groups, &opts(1.0, 1)).is_err());
    assert!(plan_prune(n.spec(), &recs, &groups, &opts(0.5, 0)).is_err());
    assert!(plan_prune(n.spec(), &recs[1..], &groups, &opts(0.5, 1)).is_err());
}
