use super::{LossKind, Op, Tape, Target, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Tape<T> {
    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check_live()?;
        let out = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.needs(input);
        Ok(self.push(out, rg, Op::Relu { input }))
    }

    /// Max pooling with a square window and no padding.
    pub fn max_pool(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.check_live()?;
        let x = self.value(input);
        let [n, c, h, w] = x.dims4()?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(Error::config(format!("pool window {kernel}/{stride} does not fit {h}x{w}")));
        }
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.needs(input);
        Ok(self.push(out, rg, Op::MaxPool { input, argmax }))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        self.check_live()?;
        let x = self.value(input);
        let [n, c, h, w] = x.dims4()?;
        let hw = h * w;
        let out: Vec<T> = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() / T::of(hw as f64)).collect();
        let out = Tensor::new(vec![n, c], out)?;
        let rg = self.needs(input);
        Ok(self.push(out, rg, Op::GlobalAvgPool { input }))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        self.check_live()?;
        let x = self.value(input);
        let n = x.shape()[0];
        let d = x.len() / n;
        let out = x.clone().reshape(vec![n, d])?;
        let mut out = out;
        out.clear_grad();
        let rg = self.needs(input);
        Ok(self.push(out, rg, Op::Flatten { input }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::config(format!("add: shapes {:?} and {:?} differ", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        self.check_live()?;
        let out = self.value(input).map(|x| x * factor);
        out.ensure_finite("scale")?;
        let rg = self.needs(input);
        Ok(self.push(out, rg, Op::Scale { input, factor }))
    }

    /// `input [N, D] · weight [D, K] + bias [K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.check_live()?;
        let [n, d] = self.value(input).dims2()?;
        let [wd, k] = self.value(weight).dims2()?;
        if wd != d {
            return Err(Error::config(format!("linear: input width {d} but weight expects {wd}")));
        }
        if self.value(bias).shape() != [k] {
            return Err(Error::config(format!("linear: bias must have shape [{k}]")));
        }
        let mut out = vec![T::zero(); n * k];
        T::gemm(n, d, k, self.value(input).data(), false, self.value(weight).data(), false, T::zero(), &mut out);
        let b = self.value(bias).data();
        for row in out.chunks_mut(k) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
        }
        let out = Tensor::new(vec![n, k], out)?;
        out.ensure_finite("linear")?;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, rg, Op::Linear { input, weight, bias }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check_live()?;
        let s = self.value(input).data().iter().copied().sum::<T>();
        let rg = self.needs(input);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum { input }))
    }

    /// Batch-mean loss. Cross-entropy is softmax followed by negative
    /// log-likelihood over `pred [N, K]`; MSE averages over every element.
    pub fn loss(&mut self, pred: Var, target: &Target<T>, kind: LossKind) -> Result<(Var, T)> {
        self.check_live()?;
        let v = match (kind, target) {
            (LossKind::CrossEntropy, Target::Labels(labels)) => self.cross_entropy(pred, labels)?,
            (LossKind::Mse, Target::Dense(t)) => self.mse(pred, t)?,
            (kind, _) => return Err(Error::config(format!("loss {kind:?} got the wrong kind of target"))),
        };
        let value = self.value(v).data()[0];
        Ok((v, value))
    }

    fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let [n, k] = x.dims2()?;
        if labels.len() != n {
            return Err(Error::config(format!("cross_entropy: {n} rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::config(format!("cross_entropy: class {bad} out of range 0..{k}")));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (row, (&y, p)) in x.data().chunks(k).zip(labels.iter().zip(probs.chunks_mut(k))) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - max).exp();
                z += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= z);
            total += z.ln() + max - row[y];
        }
        let loss = Tensor::scalar(total / T::of(n as f64));
        loss.ensure_finite("cross_entropy")?;
        let rg = self.needs(logits);
        Ok(self.push(loss, rg, Op::CrossEntropy { logits, probs, labels: labels.to_vec() }))
    }

    fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let x = self.value(pred);
        if x.shape() != target.shape() {
            return Err(Error::config(format!(
                "mse: prediction {:?} vs target {:?}",
                x.shape(),
                target.shape()
            )));
        }
        let diff: Vec<T> = x.data().iter().zip(target.data()).map(|(&a, &b)| a - b).collect();
        let loss = Tensor::scalar(diff.iter().map(|&d| d * d).sum::<T>() / T::of(diff.len() as f64));
        loss.ensure_finite("mse")?;
        let rg = self.needs(pred);
        Ok(self.push(loss, rg, Op::Mse { pred, diff }))
    }
}

pub(crate) fn relu_backward<T: Scalar>(x: &[T], g: &[T]) -> Vec<T> {
    x.iter().zip(g).map(|(&x, &g)| if x > T::zero() { g } else { T::zero() }).collect()
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    wshape: &[usize],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (d, k) = (wshape[0], wshape[1]);
    let n = x.len() / d;
    let mut dx = vec![T::zero(); n * d];
    T::gemm(n, k, d, dy, false, w, true, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); d * k];
    T::gemm(d, n, k, x, true, dy, false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); k];
    for row in dy.chunks(k) {
        db.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
    }
    (dx, dw, db)
}

pub(crate) fn cross_entropy_backward<T: Scalar>(probs: &[T], labels: &[usize], upstream: T) -> Vec<T> {
    let n = labels.len();
    let k = probs.len() / n;
    let scale = upstream / T::of(n as f64);
    let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (i, &y) in labels.iter().enumerate() {
        dx[i * k + y] -= scale;
    }
    dx
}
