//! Reverse-mode automatic differentiation over a fixed operator set.
//!
//! A [`Tape`] owns every value produced during a forward pass. Each value is
//! created by exactly one recorded operation, so recording order is already
//! a topological order and [`Tape::backward`] simply walks it in reverse.
//!
//! Parameters enter the tape as leaves (copies of the network tensors);
//! after the backward pass their gradients are read back with
//! [`Tape::grad`].

mod conv;
mod norm;
mod ops;

pub use conv::ConvGeom;
pub use norm::{BatchMoments, BnStats};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch normalisation uses batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Loss functions the engine differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::config(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// Supervision for [`Tape::loss`].
#[derive(Debug, Clone)]
pub enum Target<T> {
    Labels(Vec<usize>),
    Dense(Tensor<T>),
}

type GradHook<T> = Box<dyn Fn(&[usize], &mut [T]) + Send>;

pub(crate) enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom, cols: Vec<T> },
    BatchNorm { input: Var, gamma: Var, beta: Var, cache: norm::BnCache<T> },
    Relu { input: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    GlobalAvgPool { input: Var },
    Flatten { input: Var },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Linear { input: Var, weight: Var, bias: Var },
    CrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<usize> },
    Mse { pred: Var, diff: Vec<T> },
    Sum { input: Var },
}

/// Recording of one forward pass.
pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    requires_grad: Vec<bool>,
    ops: Vec<Op<T>>,
    hooks: Vec<(usize, GradHook<T>)>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), requires_grad: Vec::new(), ops: Vec::new(), hooks: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Records a differentiable leaf (a parameter or an input we want ∂L/∂x for).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient (input data).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    /// ∂L/∂v after [`backward`](Self::backward); `None` if no gradient reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.values[v.0].grad()
    }

    /// Like [`grad`](Self::grad) but materialises zeros for untouched values.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        self.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); self.values[v.0].len()])
    }

    /// Registers a hook that may rewrite ∂L/∂v once it is complete, before it
    /// flows further upstream. The hook receives the shape of `v`.
    pub fn set_grad_hook(&mut self, v: Var, hook: impl Fn(&[usize], &mut [T]) + Send + 'static) {
        self.hooks.push((v.0, Box::new(hook)));
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::config("tape already consumed by backward"))
        } else {
            Ok(())
        }
    }

    /// Propagates ∂L/∂x from the scalar `loss` to every recorded value.
    ///
    /// Nodes are visited in exact reverse recording order. The tape is
    /// consumed afterwards: values and gradients stay readable, but no new
    /// operations may be recorded and `backward` cannot run again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_live()?;
        if self.values[loss.0].len() != 1 {
            return Err(Error::config(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.consumed = true;
        self.values[loss.0].set_grad(vec![T::one()])?;
        let ops = std::mem::take(&mut self.ops);
        for (idx, op) in ops.into_iter().enumerate().take(loss.0 + 1).rev() {
            let Some(mut g) = self.values[idx].take_grad() else { continue };
            for (target, hook) in &self.hooks {
                if *target == idx {
                    hook(self.values[idx].shape(), &mut g);
                }
            }
            self.propagate(op, &g)?;
            self.values[idx].set_grad(g)?;
        }
        Ok(())
    }

    fn send(&mut self, v: Var, delta: &[T]) {
        if self.requires_grad[v.0] {
            self.values[v.0].accumulate_grad(delta);
        }
    }

    fn propagate(&mut self, op: Op<T>, g: &[T]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom, cols } => {
                let (dx, dw, db) = conv::backward(
                    &geom,
                    &cols,
                    self.values[weight.0].data(),
                    g,
                    self.needs(input),
                );
                if let Some(dx) = dx {
                    self.send(input, &dx);
                }
                self.send(weight, &dw);
                self.send(bias, &db);
            }
            Op::BatchNorm { input, gamma, beta, cache } => {
                let (dx, dg, db) = norm::backward(
                    &cache,
                    self.values[input.0].data(),
                    self.values[gamma.0].data(),
                    g,
                );
                self.send(input, &dx);
                self.send(gamma, &dg);
                self.send(beta, &db);
            }
            Op::Relu { input } => {
                let dx = ops::relu_backward(self.values[input.0].data(), g);
                self.send(input, &dx);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.values[input.0].len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                self.send(input, &dx);
            }
            Op::GlobalAvgPool { input } => {
                let [_, _, h, w] = self.values[input.0].dims4()?;
                let hw = h * w;
                let scale = T::one() / T::of(hw as f64);
                let dx: Vec<T> = (0..self.values[input.0].len()).map(|i| g[i / hw] * scale).collect();
                self.send(input, &dx);
            }
            Op::Flatten { input } => self.send(input, g),
            Op::Add { a, b } => {
                self.send(a, g);
                self.send(b, g);
            }
            Op::Scale { input, factor } => {
                let dx: Vec<T> = g.iter().map(|&x| x * factor).collect();
                self.send(input, &dx);
            }
            Op::Linear { input, weight, bias } => {
                let (dx, dw, db) = ops::linear_backward(
                    self.values[input.0].data(),
                    self.values[weight.0].data(),
                    self.values[weight.0].shape(),
                    g,
                );
                self.send(input, &dx);
                self.send(weight, &dw);
                self.send(bias, &db);
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let dx = ops::cross_entropy_backward(&probs, &labels, g[0]);
                self.send(logits, &dx);
            }
            Op::Mse { pred, diff } => {
                let scale = T::of(2.0) * g[0] / T::of(diff.len() as f64);
                let dx: Vec<T> = diff.iter().map(|&d| d * scale).collect();
                self.send(pred, &dx);
            }
            Op::Sum { input } => {
                let dx = vec![g[0]; self.values[input.0].len()];
                self.send(input, &dx);
            }
        }
        Ok(())
    }
}
