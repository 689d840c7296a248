//! Per-channel batch normalisation over the batch and spatial axes.

use super::{Mode, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Statistics and ε a batch-norm call needs besides γ and β.
#[derive(Debug, Clone, Copy)]
pub struct BnStats<'a, T> {
    pub running_mean: &'a [T],
    pub running_var: &'a [T],
    pub eps: T,
}

/// Batch moments measured by a train-mode call, for the running-average update.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Biased (1/m) variance.
    pub var: Vec<T>,
    /// Elements per channel, m = N·H·W.
    pub count: usize,
}

pub(crate) struct BnCache<T> {
    mode: Mode,
    channels: usize,
    plane: usize,
    mean: Vec<T>,
    var: Vec<T>,
    eps: T,
    xhat: Vec<T>,
}

impl<T: Scalar> BnCache<T> {
    fn inv_std(&self, c: usize) -> T {
        T::one() / (self.var[c] + self.eps).sqrt()
    }
}

/// Iterates the flat offsets of channel `c` in an `[N, C, plane]` buffer.
fn channel_offsets(n: usize, channels: usize, plane: usize, c: usize) -> impl Iterator<Item = usize> {
    (0..n).flat_map(move |b| {
        let start = (b * channels + c) * plane;
        start..start + plane
    })
}

impl<T: Scalar> Tape<T> {
    /// `γ · (x − μ)/√(σ² + ε) + β` per channel of `input [N, C, H, W]`.
    ///
    /// Train mode measures μ, σ² over N·H·W and returns them so the caller
    /// can fold them into its running averages; eval mode reads
    /// `stats.running_*` instead.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_, T>,
        mode: Mode,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        self.check_live()?;
        let x = self.value(input);
        let [n, c, h, w] = x.dims4()?;
        let plane = h * w;
        let m = n * plane;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::config(format!("batchnorm: {name} must have shape [{c}]")));
            }
        }
        if !(stats.eps > T::zero()) {
            return Err(Error::config("batchnorm: eps must be positive"));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::config(format!(
                        "batchnorm in train mode needs N·H·W >= 2, got {m}"
                    )));
                }
                let xd = x.data();
                let mut mean = Vec::with_capacity(c);
                let mut var = Vec::with_capacity(c);
                for ch in 0..c {
                    let mu = channel_offsets(n, c, plane, ch).map(|i| xd[i].as_f64()).sum::<f64>() / m as f64;
                    let s2 = channel_offsets(n, c, plane, ch)
                        .map(|i| {
                            let d = xd[i].as_f64() - mu;
                            d * d
                        })
                        .sum::<f64>()
                        / m as f64;
                    mean.push(T::of(mu));
                    var.push(T::of(s2));
                }
                (mean, var)
            }
            Mode::Eval => {
                if stats.running_mean.len() != c || stats.running_var.len() != c {
                    return Err(Error::config(format!("batchnorm: running stats must have length {c}")));
                }
                (stats.running_mean.to_vec(), stats.running_var.to_vec())
            }
        };
        let mut cache = BnCache { mode, channels: c, plane, mean, var, eps: stats.eps, xhat: vec![T::zero(); x.len()] };
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xd = x.data();
        let mut out = vec![T::zero(); x.len()];
        for ch in 0..c {
            let inv = cache.inv_std(ch);
            let mu = cache.mean[ch];
            for i in channel_offsets(n, c, plane, ch) {
                let xhat = (xd[i] - mu) * inv;
                cache.xhat[i] = xhat;
                out[i] = g[ch] * xhat + b[ch];
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        out.ensure_finite("batchnorm")?;
        let moments = (mode == Mode::Train).then(|| BatchMoments { mean: cache.mean.clone(), var: cache.var.clone(), count: m });
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let v = self.push(out, rg, Op::BatchNorm { input, gamma, beta, cache });
        Ok((v, moments))
    }
}

/// Returns `(dx, dgamma, dbeta)`.
///
/// Train mode follows the batch-statistics chain rule term by term:
/// ∂L/∂F̂ = ∂L/∂F̄ · γ, then ∂L/∂σ², then ∂L/∂μ, then ∂L/∂x.
pub(crate) fn backward<T: Scalar>(cache: &BnCache<T>, x: &[T], gamma: &[T], dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (c, plane) = (cache.channels, cache.plane);
    let n = x.len() / (c * plane);
    let m = T::of((n * plane) as f64);
    let two = T::of(2.0);
    let half = T::of(0.5);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let idx = || channel_offsets(n, c, plane, ch);
        dgamma[ch] = idx().map(|i| dy[i] * cache.xhat[i]).sum();
        dbeta[ch] = idx().map(|i| dy[i]).sum();
        let inv = cache.inv_std(ch);
        match cache.mode {
            Mode::Eval => {
                for i in idx() {
                    dx[i] = dy[i] * gamma[ch] * inv;
                }
            }
            Mode::Train => {
                let mu = cache.mean[ch];
                let var_eps = cache.var[ch] + cache.eps;
                let dvar: T = idx().map(|i| dy[i] * gamma[ch] * (x[i] - mu)).sum::<T>()
                    * (-half)
                    * var_eps.powf(T::of(-1.5));
                let dmean: T = idx().map(|i| dy[i] * gamma[ch] * (-inv)).sum::<T>()
                    + dvar * idx().map(|i| -two * (x[i] - mu)).sum::<T>() / m;
                for i in idx() {
                    dx[i] = dy[i] * gamma[ch] * inv + dvar * two * (x[i] - mu) / m + dmean / m;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
