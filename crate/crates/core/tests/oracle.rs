mod common;

use common::{rng, trained_tiny, uniform};
use gfbs_core::autograd::{LossKind, Target};
use gfbs_core::netgraph::{build_coupling_groups, ChannelRef, Network, NetworkSpec};
use gfbs_core::oracle::*;
use gfbs_core::saliency::{compute_saliency, PruneConfig};
use gfbs_core::Tensor;

const NET: &str = "input 2 6 6\nconv_bn_relu 5 3 1 1\nconv_bn_relu 4 3 1 1\ngap\nlinear 3\n";

fn setup(seed: u64) -> (Network<f64>, Tensor<f64>, Target<f64>) {
    let n = Network::build(&NetworkSpec::parse(NET).unwrap(), seed).unwrap();
    (n, uniform(&mut rng(seed + 1), &[6, 2, 6, 6]), Target::Labels(vec![0, 1, 2, 0, 1, 2]))
}

#[test]
fn one_record_per_group_and_net_untouched() {
    let (n, x, y) = setup(1);
    let before = n.clone();
    let groups = build_coupling_groups(&n).unwrap();
    let recs = oracle_delta_loss(&n, &groups, &x, &y, LossKind::CrossEntropy).unwrap();
    assert_eq!(recs.len(), groups.len());
    assert_eq!(n, before);
    let mut ranks: Vec<usize> = recs.iter().map(|r| r.rank).collect();
    ranks.sort();
    assert_eq!(ranks, (0..groups.len()).collect::<Vec<_>>());
    assert!(recs.iter().all(|r| r.delta_loss >= 0.0));
}

#[test]
fn dead_channel_has_zero_delta() {
    let (mut n, x, y) = setup(2);
    // γ already zero: zeroing it again changes nothing
    zero_gamma(&mut n, &[ChannelRef { layer: 1, channel: 3 }]).unwrap();
    let groups = build_coupling_groups(&n).unwrap();
    let recs = oracle_delta_loss(&n, &groups, &x, &y, LossKind::CrossEntropy).unwrap();
    let dead = recs.iter().find(|r| r.members == [ChannelRef { layer: 1, channel: 3 }]).unwrap();
    assert_eq!(dead.delta_loss, 0.0);
}

#[test]
fn gamma_and_filter_zeroing_agree_in_train_mode() {
    let (n, x, y) = setup(3);
    let groups = build_coupling_groups(&n).unwrap();
    let checks = structural_spot_check(&n, &groups, &x, &y, LossKind::CrossEntropy, 5, 0).unwrap();
    assert_eq!(checks.len(), 5);
    for c in checks {
        assert!(c.abs_diff() <= 1e-6, "{c:?}");
    }
}

#[test]
fn loss_scale_scales_delta_and_taylor_scores() {
    let (n, x, y) = setup(4);
    let groups = build_coupling_groups(&n).unwrap();
    let scaled = Objective { kind: LossKind::CrossEntropy, scale: 3.0 };
    let a = oracle_delta_loss(&n, &groups, &x, &y, LossKind::CrossEntropy).unwrap();
    let b = oracle_delta_loss(&n, &groups, &x, &y, scaled).unwrap();
    for (a, b) in a.iter().zip(&b) {
        assert!((3.0 * a.delta_loss - b.delta_loss).abs() <= 1e-10);
        assert_eq!(a.rank, b.rank);
    }
    let ta = feature_taylor_saliency(&n, &x, &y, LossKind::CrossEntropy, TaylorSite::PostBn).unwrap();
    let tb = feature_taylor_saliency(&n, &x, &y, scaled, TaylorSite::PostBn).unwrap();
    for (la, lb) in ta.iter().zip(&tb) {
        for (a, b) in la.iter().zip(lb) {
            assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

#[test]
fn taylor_scores_vanish_without_gradient() {
    let (mut n, x, y) = setup(5);
    for l in n.layers_mut() {
        if let gfbs_core::netgraph::Layer::Linear { weight, .. } = l {
            *weight = Tensor::zeros(weight.shape());
        }
    }
    for site in [TaylorSite::PreBn, TaylorSite::PostBn, TaylorSite::Activation] {
        let t = feature_taylor_saliency(&n, &x, &y, LossKind::CrossEntropy, site).unwrap();
        assert!(t.iter().flatten().all(|&v| v == 0.0));
    }
}

#[test]
fn pre_bn_taylor_is_degenerate_and_post_bn_matches_gamma_gradient() {
    let (n, x, y) = setup(6);
    let pre = feature_taylor_saliency(&n, &x, &y, LossKind::CrossEntropy, TaylorSite::PreBn).unwrap();
    let post = feature_taylor_saliency(&n, &x, &y, LossKind::CrossEntropy, TaylorSite::PostBn).unwrap();
    let max_post = post.iter().flatten().cloned().fold(0.0, f64::max);
    assert!(max_post > 0.0);
    // the residual is the ε-leak ε/(σ²+ε) of the normalization backward
    for (lp, lq) in pre.iter().zip(&post) {
        for (p, q) in lp.iter().zip(lq) {
            assert!(*p <= 1e-3 * q, "{p} vs {q}");
        }
    }

    let recs = gfbs_core::saliency::capture(&n, &x, &y, LossKind::CrossEntropy).unwrap();
    for r in recs {
        let want = (r.gamma * r.grad_gamma).abs();
        let got = post[r.channel.layer][r.channel.channel];
        assert!((want - got).abs() <= 1e-9 * want.max(1e-12), "{want} vs {got}");
    }
}

#[test]
fn gfbs_ranking_tracks_oracle_after_brief_training() {
    let (trained, data) = trained_tiny(4);
    let n = trained.cast::<f64>();
    let d = data.cast::<f64>();
    let (x, y) = d.train.head(128).unwrap();
    let groups = build_coupling_groups(&n).unwrap();
    let oracle = oracle_delta_loss(&n, &groups, &x, &y, LossKind::CrossEntropy).unwrap();
    let recs = compute_saliency(&n, &[(x, y)], LossKind::CrossEntropy, &PruneConfig::default()).unwrap();
    let a: Vec<f64> = recs.iter().map(|r| r.score).collect();
    let b: Vec<f64> = oracle.iter().map(|r| r.delta_loss).collect();
    assert!(spearman(&a, &b).unwrap() > 0.0);
}

#[test]
fn csv_lists_every_member() {
    let (n, x, y) = setup(7);
    let groups = build_coupling_groups(&n).unwrap();
    let recs = oracle_delta_loss(&n, &groups, &x, &y, LossKind::CrossEntropy).unwrap();
    let csv = to_csv(&recs);
    assert!(csv.starts_with(CSV_HEADER));
    assert_eq!(csv.lines().count(), 1 + 9);
}
