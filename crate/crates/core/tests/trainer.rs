mod common;

use common::TINY;
use gfbs_core::autograd::LossKind;
use gfbs_core::data::{gen_clean_patches, gen_shapes_dataset, make_noisy_pairs};
use gfbs_core::netgraph::{build_coupling_groups, Network, NetworkSpec};
use gfbs_core::saliency::{compute_saliency, PruneConfig};
use gfbs_core::surgeon::{apply_prune, plan_prune, PlanOptions};
use gfbs_core::trainer::*;
use gfbs_core::Error;

fn tiny(seed: u64) -> Network<f32> {
    Network::build(&NetworkSpec::parse(TINY).unwrap(), seed).unwrap()
}

fn short(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, milestones: vec![], eval_every: epochs, ..TrainConfig::classification() }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = gen_shapes_dataset::<f32>(128, 32, 16, 1).unwrap();
    let mut net = tiny(1);
    let before = net.named_tensors();
    train(&mut net, &data, &TrainConfig { lr: 0.0, weight_decay: 0.0, ..short(2) }).unwrap();
    // running statistics still move; trainable tensors must not
    for ((name, a), (_, b)) in before.iter().zip(net.named_tensors()) {
        if !name.contains("running") {
            assert_eq!(a, &b, "{name}");
        }
    }
}

#[test]
fn random_init_is_near_chance() {
    let data = gen_shapes_dataset::<f32>(2, 1000, 16, 2).unwrap();
    let acc = evaluate(&tiny(2), &data.test, data.task, 100).unwrap().metric;
    assert!((acc - 0.1).abs() <= 0.05, "{acc}");
}

#[test]
fn training_is_deterministic() {
    let data = gen_shapes_dataset::<f32>(128, 32, 16, 3).unwrap();
    let run = || {
        let mut net = tiny(3);
        let h = train(&mut net, &data, &short(2)).unwrap();
        (net, h.rows)
    };
    assert_eq!(run(), run());
}

#[test]
fn eval_is_batch_size_invariant() {
    let data = gen_shapes_dataset::<f32>(128, 96, 16, 4).unwrap();
    let mut net = tiny(4);
    train(&mut net, &data, &short(1)).unwrap();
    let a = evaluate(&net, &data.test, data.task, 96).unwrap();
    let b = evaluate(&net, &data.test, data.task, 7).unwrap();
    assert_eq!(a.metric, b.metric);
    assert!((a.loss - b.loss).abs() <= 1e-5 * a.loss.abs());
}

#[test]
fn divergence_is_reported() {
    let data = gen_shapes_dataset::<f32>(128, 32, 16, 5).unwrap();
    let mut net = tiny(5);
    let cfg = TrainConfig { lr: 1e30, momentum: 0.0, ..short(3) };
    match train(&mut net, &data, &cfg) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("diverged"), "{msg}"),
        other => panic!("expected a numeric error, got {:?}", other.map(|h| h.rows)),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let data = gen_shapes_dataset::<f32>(64, 16, 16, 6).unwrap();
    let mut net = tiny(6);
    for cfg in [
        TrainConfig { batch_size: 1, ..short(1) },
        TrainConfig { lr: -1.0, ..short(1) },
        TrainConfig { milestones: vec![3], ..short(2) },
        TrainConfig { momentum: 1.0, ..short(1) },
        TrainConfig { loss: LossKind::Mse, ..short(1) },
    ] {
        assert!(matches!(train(&mut net, &data, &cfg), Err(Error::Config(_))), "{cfg:?}");
    }
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs":1,"batch_size":8,"lr":0.1,"loss":"cross_entropy","bogus":1}"#).is_err());
}

#[test]
fn schedule_and_psnr_helpers() {
    let cfg = TrainConfig::classification();
    assert_eq!(cfg.lr_at(0), 0.05);
    assert!((cfg.lr_at(40) - 0.01).abs() < 1e-15);
    assert!((cfg.lr_at(59) - 0.002).abs() < 1e-15);
    assert_eq!(psnr(0.0), PSNR_CAP_DB);
    assert_eq!(psnr(1e-30), PSNR_CAP_DB);
    assert!((psnr(0.01) - 20.0).abs() < 1e-12);
    let ft = TrainConfig::denoising_finetune();
    assert_eq!((ft.epochs, ft.lr, ft.milestones.clone(), ft.optimizer), (50, 1e-4, vec![40], OptimizerKind::Adam));
}

#[test]
fn identity_psnr_matches_noise_level() {
    let clean = gen_clean_patches::<f64>(64, 2, 32, 7).unwrap();
    let sigma = 50.0;
    let noisy = make_noisy_pairs(&clean, sigma, 7).unwrap();
    let expected = 20.0 * (255.0f64 / sigma).log10();
    let got = identity_psnr(&noisy.train).unwrap();
    assert!((got - expected).abs() < 0.1, "{got} vs {expected}");
}

#[test]
fn denoiser_learns_residual() {
    let clean = gen_clean_patches::<f32>(64, 16, 12, 8).unwrap();
    let data = make_noisy_pairs(&clean, 50.0, 1).unwrap();
    let spec = "input 1 12 12\nconv_bn_relu 8 3 1 1\nconv_bn_relu 8 3 1 1\nconv 1 3 1 1\n";
    let mut net = Network::<f32>::build(&NetworkSpec::parse(spec).unwrap(), 8).unwrap();
    let h = train(&mut net, &data, &TrainConfig { epochs: 15, milestones: vec![], batch_size: 16, lr: 2e-3, ..TrainConfig::denoising() }).unwrap();
    let base = identity_psnr(&data.test).unwrap();
    assert!(h.last(SplitName::Test).unwrap().metric > base + 1.0);
}

#[test]
fn classifier_trains_and_survives_pruning() {
    let data = gen_shapes_dataset::<f32>(1000, 300, 16, 9).unwrap();
    let mut net = tiny(9);
    let cfg = TrainConfig { epochs: 30, milestones: vec![20, 25], eval_every: 30, ..TrainConfig::classification() };
    let h = train(&mut net, &data, &cfg).unwrap();
    let train_acc = h.last(SplitName::Train).unwrap().metric;
    assert!(train_acc >= 0.9, "{train_acc}");
    let base = evaluate(&net, &data.test, data.task, 100).unwrap().metric;

    let ft_cfg = TrainConfig { epochs: 5, milestones: vec![], eval_every: 5, ..TrainConfig::classification_finetune() };
    let mut same = net.clone();
    finetune(&mut same, &data, &TrainConfig { lr: 1e-3, ..ft_cfg.clone() }).unwrap();
    let same_acc = evaluate(&same, &data.test, data.task, 100).unwrap().metric;
    assert!((same_acc - base).abs() <= 0.02, "{base} -> {same_acc}");

    let groups = build_coupling_groups(&net).unwrap();
    let recs = compute_saliency(&net, &[data.train.head(64).unwrap()], LossKind::CrossEntropy, &PruneConfig::default()).unwrap();
    let plan = plan_prune(net.spec(), &recs, &groups, &PlanOptions { tau: 0.5, ..PlanOptions::from_config(&PruneConfig::default()) }).unwrap();
    let mut pruned = apply_prune(&net, &plan).unwrap();
    let before = evaluate(&pruned, &data.test, data.task, 100).unwrap().metric;
    finetune(&mut pruned, &data, &ft_cfg).unwrap();
    let after = evaluate(&pruned, &data.test, data.task, 100).unwrap().metric;
    assert!(after >= before, "{before} -> {after}");
}
