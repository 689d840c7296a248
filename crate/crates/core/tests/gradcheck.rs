//! Tape gradients against central finite differences (f64, h = 1e-5).

mod common;

use common::{gradcheck, rng, uniform};
use gfbs_core::autograd::{BnStats, LossKind, Mode, Target};
use gfbs_core::Tensor;
use rand::Rng;

const H: f64 = 1e-5;

#[test]
fn conv2d_matches_finite_differences() {
    let mut r = rng(11);
    let x = uniform(&mut r, &[2, 3, 8, 8]);
    let w = uniform(&mut r, &[4, 3, 3, 3]);
    let b = uniform(&mut r, &[4]);
    let target = uniform(&mut r, &[2, 4, 8, 8]);
    let errs = gradcheck(&[x, w, b], H, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
        Ok(t.loss(y, &Target::Dense(target.clone()), LossKind::Mse)?.0)
    });
    for e in errs {
        assert!(e <= 1e-6, "conv rel err {e}");
    }
}

#[test]
fn strided_and_pointwise_conv_match_finite_differences() {
    let mut r = rng(12);
    for &(k, s, p) in &[(3, 2, 1), (1, 1, 0), (2, 2, 0)] {
        let x = uniform(&mut r, &[2, 2, 6, 6]);
        let w = uniform(&mut r, &[3, 2, k, k]);
        let b = uniform(&mut r, &[3]);
        let errs = gradcheck(&[x, w, b], H, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], s, p)?;
            let y = t.relu(y)?;
            t.sum(y)
        });
        for e in errs {
            assert!(e <= 1e-6, "conv k{k} s{s} p{p} rel err {e}");
        }
    }
}

#[test]
fn batchnorm_train_matches_finite_differences() {
    let mut r = rng(13);
    let x = uniform(&mut r, &[3, 4, 5, 5]);
    let g = uniform(&mut r, &[4]);
    let b = uniform(&mut r, &[4]);
    let target = uniform(&mut r, &[3, 4, 5, 5]);
    let zeros = vec![0.0; 4];
    let ones = vec![1.0; 4];
    let errs = gradcheck(&[x, g, b], H, |t, v| {
        let stats = BnStats { running_mean: &zeros, running_var: &ones, eps: 1e-5 };
        let (y, _) = t.batchnorm(v[0], v[1], v[2], stats, Mode::Train)?;
        Ok(t.loss(y, &Target::Dense(target.clone()), LossKind::Mse)?.0)
    });
    for e in errs {
        assert!(e <= 1e-6, "bn rel err {e}");
    }
}

#[test]
fn batchnorm_eval_matches_finite_differences() {
    let mut r = rng(14);
    let x = uniform(&mut r, &[2, 3, 4, 4]);
    let g = uniform(&mut r, &[3]);
    let b = uniform(&mut r, &[3]);
    let mean = vec![0.1, -0.2, 0.3];
    let var = vec![0.5, 1.5, 2.0];
    let errs = gradcheck(&[x, g, b], H, |t, v| {
        let stats = BnStats { running_mean: &mean, running_var: &var, eps: 1e-5 };
        let (y, _) = t.batchnorm(v[0], v[1], v[2], stats, Mode::Eval)?;
        let y = t.relu(y)?;
        t.sum(y)
    });
    for e in errs {
        assert!(e <= 1e-6, "bn eval rel err {e}");
    }
}

#[test]
fn relu_matches_finite_differences_away_from_zero() {
    let mut r = rng(15);
    let x = Tensor::from_fn(&[4, 6], |_| {
        let v: f64 = r.random_range(1e-3..1.0);
        if r.random::<bool>() { v } else { -v }
    });
    let w = uniform(&mut r, &[4, 6]);
    let errs = gradcheck(&[x], H, |t, v| {
        let y = t.relu(v[0])?;
        Ok(t.loss(y, &Target::Dense(w.clone()), LossKind::Mse)?.0)
    });
    assert!(errs[0] <= 1e-6, "relu rel err {}", errs[0]);
}

#[test]
fn linear_matches_finite_differences() {
    let mut r = rng(16);
    let x = uniform(&mut r, &[5, 7]);
    let w = uniform(&mut r, &[7, 3]);
    let b = uniform(&mut r, &[3]);
    let errs = gradcheck(&[x, w, b], H, |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        Ok(t.loss(y, &Target::Labels(vec![0, 1, 2, 1, 0]), LossKind::CrossEntropy)?.0)
    });
    for e in errs {
        assert!(e <= 1e-6, "linear rel err {e}");
    }
}

#[test]
fn cross_entropy_and_mse_match_finite_differences() {
    let mut r = rng(17);
    let logits = uniform(&mut r, &[6, 10]);
    let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..10)).collect();
    let errs = gradcheck(&[logits.clone()], H, |t, v| {
        Ok(t.loss(v[0], &Target::Labels(labels.clone()), LossKind::CrossEntropy)?.0)
    });
    assert!(errs[0] <= 1e-6, "ce rel err {}", errs[0]);
    let target = uniform(&mut r, &[6, 10]);
    let errs = gradcheck(&[logits], H, |t, v| Ok(t.loss(v[0], &Target::Dense(target.clone()), LossKind::Mse)?.0));
    assert!(errs[0] <= 1e-6, "mse rel err {}", errs[0]);
}

#[test]
fn pooling_flatten_add_scale_match_finite_differences() {
    let mut r = rng(18);
    let a = uniform(&mut r, &[2, 3, 6, 6]);
    let b = uniform(&mut r, &[2, 3, 6, 6]);
    let w = uniform(&mut r, &[27, 4]);
    let bias = uniform(&mut r, &[4]);
    let errs = gradcheck(&[a, b, w, bias], H, |t, v| {
        let s = t.add(v[0], v[1])?;
        let s = t.scale(s, 0.7)?;
        let p = t.max_pool(s, 2, 2)?;
        let f = t.flatten(p)?;
        let y = t.linear(f, v[2], v[3])?;
        Ok(t.loss(y, &Target::Labels(vec![3, 1]), LossKind::CrossEntropy)?.0)
    });
    for e in errs {
        assert!(e <= 1e-6, "pool chain rel err {e}");
    }
    let x = uniform(&mut r, &[2, 3, 4, 4]);
    let errs = gradcheck(&[x], H, |t, v| {
        let g = t.global_avg_pool(v[0])?;
        let g = t.relu(g)?;
        t.sum(g)
    });
    assert!(errs[0] <= 1e-6, "gap rel err {}", errs[0]);
}
