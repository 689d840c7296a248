//! Parameter storage and full-network forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{Activation, BlockKind, BlockSpec, NetworkSpec};
use crate::autograd::{BatchMoments, BnStats, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Batch-norm affine pair plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: T::of(DEFAULT_BN_EPS),
            momentum: T::of(DEFAULT_BN_MOMENTUM),
        }
    }

    /// Folds one batch's moments into the running averages.
    /// The running variance tracks the unbiased estimate m/(m−1)·σ².
    pub fn update_running(&mut self, moments: &BatchMoments<T>) {
        let mom = self.momentum;
        let keep = T::one() - mom;
        let m = moments.count as f64;
        let unbias = T::of(m / (m - 1.0).max(1.0));
        for (r, &mu) in self.running_mean.data_mut().iter_mut().zip(&moments.mean) {
            *r = keep * *r + mom * mu;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&moments.var) {
            *r = keep * *r + mom * v * unbias;
        }
    }
}

/// Learnable parameters of one convolution: `{W, b}` and, when the
/// convolution feeds a batch norm, `{γ, β}` with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    /// `[C_out, C_in, k, k]`
    pub weight: Tensor<T>,
    /// `[C_out]`
    pub bias: Tensor<T>,
    pub norm: Option<BatchNormParams<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn norm(&self) -> Result<&BatchNormParams<T>> {
        self.norm.as_ref().ok_or_else(|| Error::config("layer has no batch norm"))
    }

    pub fn norm_mut(&mut self) -> Result<&mut BatchNormParams<T>> {
        self.norm.as_mut().ok_or_else(|| Error::config("layer has no batch norm"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit<T> {
    pub params: ParamSet<T>,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(ConvUnit<T>),
    ResidualBegin(Option<ConvUnit<T>>),
    ResidualAdd,
    Pool { kernel: usize, stride: usize },
    Gap,
    Flatten,
    Linear { weight: Tensor<T>, bias: Tensor<T> },
}

/// Tape handles of one prunable (Conv-BN) layer recorded during forward.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    pub block: usize,
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
    /// Convolution output F̃.
    pub pre_bn: Var,
    /// Batch-norm output F̄.
    pub post_bn: Var,
    /// Block output (after ReLU when present).
    pub output: Var,
}

/// Everything a forward pass recorded that callers need afterwards.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub input: Var,
    pub output: Var,
    /// One entry per tensor of [`Network::params_mut`], same order.
    pub params: Vec<Var>,
    /// One entry per prunable layer.
    pub layers: Vec<LayerTrace>,
    /// Train-mode batch moments, one per prunable layer.
    pub moments: Vec<BatchMoments<T>>,
}

/// A built network: its spec and per-block parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    layers: Vec<Layer<T>>,
}

fn init_unit<T: Scalar>(b: &BlockSpec, c_in: usize, bn: bool, relu: bool, rng: Option<&mut ChaCha8Rng>) -> ConvUnit<T> {
    let shape = [b.channels, c_in, b.kernel, b.kernel];
    let weight = match rng {
        Some(rng) => {
            let fan_in = (c_in * b.kernel * b.kernel) as f64;
            // A BN-free conv is an output head (e.g. a residual regressor):
            // start it small so early steps are not spent shrinking it.
            let gain = if bn { 2.0 } else { 0.01 };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
            Tensor::from_fn(&shape, |_| T::of(normal.sample(rng)))
        }
        None => Tensor::zeros(&shape),
    };
    ConvUnit {
        params: ParamSet { weight, bias: Tensor::zeros(&[b.channels]), norm: bn.then(|| BatchNormParams::new(b.channels)) },
        stride: b.stride,
        padding: b.padding,
        relu,
    }
}

impl<T: Scalar> Network<T> {
    /// Allocates parameters for `spec`: Kaiming fan-in normal weights
    /// (std 0.1/√fan_in for BN-free convs),
    /// zero biases, γ = 1, β = 0. Deterministic in `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::allocate(spec, Some(&mut rng))
    }

    /// Same layout as [`build`](Self::build) with every weight zero; used by loaders.
    pub fn zeroed(spec: &NetworkSpec) -> Result<Self> {
        Self::allocate(spec, None)
    }

    fn allocate(spec: &NetworkSpec, mut rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut layers = Vec::with_capacity(spec.blocks.len());
        for (b, sh) in spec.blocks.iter().zip(&shapes) {
            let c_in = match sh.input {
                Activation::Map { c, .. } => c,
                Activation::Flat { d } => d,
            };
            let layer = match b.kind {
                BlockKind::ConvBnRelu => Layer::Conv(init_unit(b, c_in, true, true, rng.as_deref_mut())),
                BlockKind::ConvBn => Layer::Conv(init_unit(b, c_in, true, false, rng.as_deref_mut())),
                BlockKind::Conv => Layer::Conv(init_unit(b, c_in, false, false, rng.as_deref_mut())),
                BlockKind::ResidualBegin => {
                    Layer::ResidualBegin(b.has_projection().then(|| init_unit(b, c_in, true, false, rng.as_deref_mut())))
                }
                BlockKind::ResidualAdd => Layer::ResidualAdd,
                BlockKind::Pool => Layer::Pool { kernel: b.kernel, stride: b.stride },
                BlockKind::Gap => Layer::Gap,
                BlockKind::Flatten => Layer::Flatten,
                BlockKind::Linear => {
                    let weight = match rng.as_deref_mut() {
                        Some(rng) => {
                            let normal = Normal::new(0.0, (2.0 / c_in as f64).sqrt()).expect("positive std");
                            Tensor::from_fn(&[c_in, b.channels], |_| T::of(normal.sample(rng)))
                        }
                        None => Tensor::zeros(&[c_in, b.channels]),
                    };
                    Layer::Linear { weight, bias: Tensor::zeros(&[b.channels]) }
                }
            };
            layers.push(layer);
        }
        Ok(Network { spec: spec.clone(), layers })
    }

    /// Assembles a network from explicit layers, checking them against `spec`.
    pub fn from_parts(spec: NetworkSpec, layers: Vec<Layer<T>>) -> Result<Self> {
        let reference = Network::<T>::zeroed(&spec)?;
        if reference.layers.len() != layers.len() {
            return Err(Error::config("layer count does not match spec"));
        }
        let net = Network { spec, layers };
        let want: Vec<Vec<usize>> = reference.named_tensors().into_iter().map(|(_, t)| t.shape().to_vec()).collect();
        let got: Vec<Vec<usize>> = net.named_tensors().into_iter().map(|(_, t)| t.shape().to_vec()).collect();
        if want != got {
            return Err(Error::config("layer parameter shapes do not match spec"));
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Conv units that carry batch norm, in prunable-layer order.
    pub fn prunable_units(&self) -> Vec<&ConvUnit<T>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(u) | Layer::ResidualBegin(Some(u)) if u.params.norm.is_some() => Some(u),
                _ => None,
            })
            .collect()
    }

    pub fn prunable_units_mut(&mut self) -> Vec<&mut ConvUnit<T>> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Conv(u) | Layer::ResidualBegin(Some(u)) if u.params.norm.is_some() => Some(u),
                _ => None,
            })
            .collect()
    }

    /// All learnable tensors in a fixed order: per block W, b, then γ, β.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(u) | Layer::ResidualBegin(Some(u)) => {
                    let p = &mut u.params;
                    out.push(&mut p.weight);
                    out.push(&mut p.bias);
                    if let Some(n) = &mut p.norm {
                        out.push(&mut n.gamma);
                        out.push(&mut n.beta);
                    }
                }
                Layer::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(u) | Layer::ResidualBegin(Some(u)) => {
                    let p = &u.params;
                    p.weight.len() + p.bias.len() + p.norm.as_ref().map_or(0, |n| n.gamma.len() + n.beta.len())
                }
                Layer::Linear { weight, bias } => weight.len() + bias.len(),
                _ => 0,
            })
            .sum()
    }

    /// Every stored tensor with its checkpoint name, including running
    /// statistics and the per-layer ε and momentum as 1-element tensors.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let unit = |prefix: String, u: &ConvUnit<T>, out: &mut Vec<(String, Tensor<T>)>| {
            out.push((format!("{prefix}.weight"), u.params.weight.clone()));
            out.push((format!("{prefix}.bias"), u.params.bias.clone()));
            if let Some(n) = &u.params.norm {
                out.push((format!("{prefix}.gamma"), n.gamma.clone()));
                out.push((format!("{prefix}.beta"), n.beta.clone()));
                out.push((format!("{prefix}.running_mean"), n.running_mean.clone()));
                out.push((format!("{prefix}.running_var"), n.running_var.clone()));
                out.push((format!("{prefix}.eps"), Tensor::scalar(n.eps)));
                out.push((format!("{prefix}.momentum"), Tensor::scalar(n.momentum)));
            }
        };
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(u) => unit(format!("blocks.{i}"), u, &mut out),
                Layer::ResidualBegin(Some(u)) => unit(format!("blocks.{i}.proj"), u, &mut out),
                Layer::Linear { weight, bias } => {
                    out.push((format!("blocks.{i}.weight"), weight.clone()));
                    out.push((format!("blocks.{i}.bias"), bias.clone()));
                }
                _ => {}
            }
        }
        out
    }

    /// Overwrites the tensor called `name`; shape must match.
    pub fn set_named(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let bad = || Error::format(format!("unknown tensor `{name}`"));
        let rest = name.strip_prefix("blocks.").ok_or_else(bad)?;
        let (idx, field) = rest.split_once('.').ok_or_else(bad)?;
        let idx: usize = idx.parse().map_err(|_| bad())?;
        let layer = self.layers.get_mut(idx).ok_or_else(bad)?;
        let (unit, field) = match (layer, field.strip_prefix("proj.")) {
            (Layer::ResidualBegin(Some(u)), Some(f)) => (u, f),
            (Layer::Conv(u), None) => (u, field),
            (Layer::Linear { weight, bias }, None) => {
                let slot = match field {
                    "weight" => weight,
                    "bias" => bias,
                    _ => return Err(bad()),
                };
                return replace(slot, value, name);
            }
            _ => return Err(bad()),
        };
        let p = &mut unit.params;
        match field {
            "weight" => replace(&mut p.weight, value, name),
            "bias" => replace(&mut p.bias, value, name),
            other => {
                let n = p.norm.as_mut().ok_or_else(bad)?;
                match other {
                    "gamma" => replace(&mut n.gamma, value, name),
                    "beta" => replace(&mut n.beta, value, name),
                    "running_mean" => replace(&mut n.running_mean, value, name),
                    "running_var" => replace(&mut n.running_var, value, name),
                    "eps" | "momentum" => {
                        if value.len() != 1 {
                            return Err(Error::format(format!("`{name}` must hold one element")));
                        }
                        let v = value.data()[0];
                        if other == "eps" {
                            if !(v > T::zero()) {
                                return Err(Error::format("batch-norm eps must be positive"));
                            }
                            n.eps = v;
                        } else {
                            n.momentum = v;
                        }
                        Ok(())
                    }
                    _ => Err(bad()),
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut out = Network::<U>::zeroed(&self.spec).expect("spec already validated");
        for (name, t) in self.named_tensors() {
            out.set_named(&name, t.cast()).expect("identical layout");
        }
        out
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [n, c, h, w] = x.dims4()?;
        if [c, h, w] != self.spec.input || n == 0 {
            return Err(Error::config(format!(
                "input shape {:?} does not match spec input {:?}",
                x.shape(),
                self.spec.input
            )));
        }
        Ok(())
    }

    /// Records a forward pass on `tape`. Running statistics are not touched;
    /// in train mode the measured moments are returned in the trace.
    pub fn forward(&self, batch: &Tensor<T>, mode: Mode, tape: &mut Tape<T>) -> Result<Trace<T>> {
        self.check_input(batch)?;
        let input = tape.constant(batch.clone());
        self.forward_from(input, mode, tape)
    }

    /// Like [`forward`](Self::forward) starting from an already recorded input.
    pub fn forward_from(&self, input: Var, mode: Mode, tape: &mut Tape<T>) -> Result<Trace<T>> {
        let mut trace = Trace { input, output: input, params: Vec::new(), layers: Vec::new(), moments: Vec::new() };
        let mut cur = input;
        let mut skips: Vec<Var> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Conv(u) => run_unit(i, u, cur, mode, tape, &mut trace)?,
                Layer::ResidualBegin(proj) => {
                    let skip = match proj {
                        Some(u) => run_unit(i, u, cur, mode, tape, &mut trace)?,
                        None => cur,
                    };
                    skips.push(skip);
                    cur
                }
                Layer::ResidualAdd => {
                    let skip = skips.pop().ok_or_else(|| Error::config("unbalanced residual"))?;
                    let sum = tape.add(cur, skip)?;
                    tape.relu(sum)?
                }
                Layer::Pool { kernel, stride } => tape.max_pool(cur, *kernel, *stride)?,
                Layer::Gap => tape.global_avg_pool(cur)?,
                Layer::Flatten => tape.flatten(cur)?,
                Layer::Linear { weight, bias } => {
                    let w = tape.leaf(weight.clone());
                    let b = tape.leaf(bias.clone());
                    trace.params.extend([w, b]);
                    tape.linear(cur, w, b)?
                }
            };
        }
        trace.output = cur;
        Ok(trace)
    }

    /// Folds train-mode moments from `trace` into the running statistics.
    pub fn update_running_stats(&mut self, moments: &[BatchMoments<T>]) -> Result<()> {
        let mut units = self.prunable_units_mut();
        if units.len() != moments.len() {
            return Err(Error::config("moment count does not match batch-norm layers"));
        }
        for (u, m) in units.iter_mut().zip(moments) {
            u.params.norm_mut()?.update_running(m);
        }
        Ok(())
    }

    /// Adds the tape gradients of every parameter into its `grad` buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, trace: &Trace<T>) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != trace.params.len() {
            return Err(Error::config("trace does not belong to this network"));
        }
        for (p, &v) in params.iter_mut().zip(&trace.params) {
            p.accumulate_grad(&tape.grad_or_zeros(v));
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::clear_grad);
    }

    /// Runs the network on `batch` and returns its output. In train mode
    /// the running statistics are updated. When `tape` is given the pass
    /// is recorded there.
    pub fn forward_full(&mut self, batch: &Tensor<T>, mode: Mode, tape: Option<&mut Tape<T>>) -> Result<Tensor<T>> {
        let mut local = Tape::new();
        let tape = tape.unwrap_or(&mut local);
        let trace = self.forward(batch, mode, tape)?;
        if mode == Mode::Train {
            self.update_running_stats(&trace.moments)?;
        }
        Ok(tape.value(trace.output).clone())
    }

    /// Eval-mode output without touching any state.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let trace = self.forward(batch, Mode::Eval, &mut tape)?;
        Ok(tape.value(trace.output).clone())
    }
}

fn replace<T: Scalar>(slot: &mut Tensor<T>, value: Tensor<T>, name: &str) -> Result<()> {
    if slot.shape() != value.shape() {
        return Err(Error::format(format!(
            "tensor `{name}` has shape {:?}, spec needs {:?}",
            value.shape(),
            slot.shape()
        )));
    }
    *slot = value;
    slot.clear_grad();
    Ok(())
}

fn run_unit<T: Scalar>(
    block: usize,
    u: &ConvUnit<T>,
    input: Var,
    mode: Mode,
    tape: &mut Tape<T>,
    trace: &mut Trace<T>,
) -> Result<Var> {
    let p = &u.params;
    let w = tape.leaf(p.weight.clone());
    let b = tape.leaf(p.bias.clone());
    trace.params.extend([w, b]);
    let pre = tape.conv2d(input, w, b, u.stride, u.padding)?;
    let Some(n) = &p.norm else {
        return if u.relu { tape.relu(pre) } else { Ok(pre) };
    };
    let g = tape.leaf(n.gamma.clone());
    let be = tape.leaf(n.beta.clone());
    trace.params.extend([g, be]);
    let stats = BnStats { running_mean: n.running_mean.data(), running_var: n.running_var.data(), eps: n.eps };
    let (post, moments) = tape.batchnorm(pre, g, be, stats, mode)?;
    trace.moments.extend(moments);
    let output = if u.relu { tape.relu(post)? } else { post };
    trace.layers.push(LayerTrace { block, weight: w, bias: b, gamma: g, beta: be, pre_bn: pre, post_bn: post, output });
    Ok(output)
}
