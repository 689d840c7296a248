//! First-order parameter updates.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub trait Optimizer<T: Scalar> {
    /// Applies one update from the gradients stored on `params`, then clears them.
    fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()>;

    fn lr(&self) -> f64;

    fn set_lr(&mut self, lr: f64);
}

fn check_grads<T: Scalar>(params: &[&mut Tensor<T>]) -> Result<()> {
    match params.iter().position(|p| p.grad().is_none()) {
        Some(i) => Err(Error::config(format!("parameter {i} has no gradient; run backward first"))),
        None => Ok(()),
    }
}

fn ensure_state<T: Scalar>(state: &mut Vec<Vec<T>>, params: &[&mut Tensor<T>]) -> Result<()> {
    if state.is_empty() {
        *state = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
    }
    if state.len() != params.len() || state.iter().zip(params).any(|(s, p)| s.len() != p.len()) {
        return Err(Error::config("optimizer state does not match the parameter list"));
    }
    Ok(())
}

/// Momentum SGD: `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: Vec::new() }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        check_grads(params)?;
        ensure_state(&mut self.velocity, params)?;
        let (lr, mu, wd) = (T::of(self.lr), T::of(self.momentum), T::of(self.weight_decay));
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let g = p.take_grad().expect("checked above");
            for ((w, v), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Adam with bias-corrected moment estimates and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        check_grads(params)?;
        ensure_state(&mut self.m, params)?;
        ensure_state(&mut self.v, params)?;
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, wd, eps) = (T::one(), T::of(self.weight_decay), T::of(self.eps));
        let (lr, c1, c2) = (T::of(self.lr), T::of(c1), T::of(c2));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.take_grad().expect("checked above");
            for (((w, m), v), g) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                let g = g + wd * *w;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::scalar(w);
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut p = scalar_param(1.25, 3.0);
        Sgd::new(0.0, 0.9, 0.0).step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.25]);
        assert!(p.grad().is_none());
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = scalar_param(1.0, 1.0);
        Sgd::new(0.1, 0.0, 0.0).step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        // v1 = 1, w1 = 1 - 0.1 = 0.9; v2 = 0.9 + 1 = 1.9, w2 = 0.9 - 0.19 = 0.71
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        let mut p = scalar_param(1.0, 1.0);
        opt.step(&mut [&mut p]).unwrap();
        p.set_grad(vec![1.0]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::<f64>::scalar(1.0);
        assert!(Sgd::new(0.1, 0.0, 0.0).step(&mut [&mut p]).is_err());
        assert!(Adam::new(0.1, 0.0).step(&mut [&mut p]).is_err());
    }

    #[test]
    fn adam_first_two_iterates_on_a_quadratic() {
        // f(w) = w², g = 2w, w0 = 1, lr = 0.1
        // t=1: g=2, m=0.2, v=0.004, m̂=2, v̂=4 → w1 = 1 - 0.1·2/(2+1e-8)
        let mut opt = Adam::new(0.1, 0.0);
        let mut p = scalar_param(1.0, 2.0);
        opt.step(&mut [&mut p]).unwrap();
        let w1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.data()[0] - w1).abs() < 1e-12);
        // t=2: g=2·w1
        let g2 = 2.0 * w1;
        p.set_grad(vec![g2]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        let m = 0.9 * 0.2 + 0.1 * g2;
        let v = 0.999 * 0.004 + 0.001 * g2 * g2;
        let mhat = m / (1.0 - 0.81);
        let vhat = v / (1.0 - 0.998001);
        let w2 = w1 - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((p.data()[0] - w2).abs() < 1e-12);
    }
}
