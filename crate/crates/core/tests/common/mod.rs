#![allow(dead_code)]

use gfbs_core::autograd::{Tape, Var};
use gfbs_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Norm-wise relative error ‖a − b‖ / max(‖a‖, ‖b‖).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-300 {
        diff
    } else {
        diff / denom
    }
}

/// Central finite-difference gradient check.
///
/// `build` records a scalar loss given one leaf per entry of `inputs`.
/// Returns the relative error of the tape gradient for each input.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    h: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Vec<f64> {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars).expect("forward");
        tape.value(loss).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");
    let mut errs = Vec::new();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad_or_zeros(*v);
        let mut numeric = vec![0.0; analytic.len()];
        let mut vals = inputs.to_vec();
        for i in 0..analytic.len() {
            let orig = vals[k].data()[i];
            vals[k].data_mut()[i] = orig + h;
            let up = eval(&vals);
            vals[k].data_mut()[i] = orig - h;
            let down = eval(&vals);
            vals[k].data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * h);
        }
        errs.push(rel_err(&analytic, &numeric));
    }
    errs
}

pub const TINY: &str = "name tiny\ninput 1 16 16\nconv_bn_relu 16 3 1 1\npool 0 2 2\nconv_bn_relu 32 3 1 1\npool 0 2 2\ngap\nlinear 10\n";

/// A small classifier briefly trained on synthetic shapes.
pub fn trained_tiny(epochs: usize) -> (gfbs_core::Network32, gfbs_core::Dataset32) {
    use gfbs_core::data::gen_shapes_dataset;
    use gfbs_core::netgraph::{Network, NetworkSpec};
    use gfbs_core::trainer::{train, TrainConfig};
    let data = gen_shapes_dataset::<f32>(600, 200, 16, 21).unwrap();
    let mut net = Network::build(&NetworkSpec::parse(TINY).unwrap(), 21).unwrap();
    let cfg = TrainConfig { epochs, milestones: vec![], eval_every: epochs, ..TrainConfig::classification() };
    train(&mut net, &data, &cfg).unwrap();
    (net, data)
}
