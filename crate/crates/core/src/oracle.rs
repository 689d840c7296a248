//! Ground truth for saliency: brute-force loss change per coupling group,
//! the feature-map first-order criterion, and rank statistics.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{LossKind, Mode, Tape, Target, Var};
use crate::error::{Error, Result};
use crate::netgraph::coupling::{ChannelRef, CouplingGroup};
use crate::netgraph::Network;
use crate::numfmt::sig9;
use crate::saliency::rank_ascending;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub group: usize,
    pub members: Vec<ChannelRef>,
    /// `|L(group zeroed) − L|` on the fixed batch.
    pub delta_loss: f64,
    pub rank: usize,
}

/// A loss kind with a constant positive factor applied to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub kind: LossKind,
    pub scale: f64,
}

impl From<LossKind> for Objective {
    fn from(kind: LossKind) -> Self {
        Objective { kind, scale: 1.0 }
    }
}

impl Objective {
    fn record<T: Scalar>(&self, tape: &mut Tape<T>, pred: Var, target: &Target<T>) -> Result<(Var, f64)> {
        let (l, v) = tape.loss(pred, target, self.kind)?;
        if self.scale == 1.0 {
            return Ok((l, v.as_f64()));
        }
        Ok((tape.scale(l, T::of(self.scale))?, v.as_f64() * self.scale))
    }
}

/// Train-mode loss on a fixed batch; the network is not modified.
pub fn batch_loss<T: Scalar>(
    net: &Network<T>,
    batch: &Tensor<T>,
    target: &Target<T>,
    loss: impl Into<Objective>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let trace = net.forward(batch, Mode::Train, &mut tape)?;
    Ok(loss.into().record(&mut tape, trace.output, target)?.1)
}

/// Sets γ of every member channel to zero.
pub fn zero_gamma<T: Scalar>(net: &mut Network<T>, members: &[ChannelRef]) -> Result<()> {
    let mut units = net.prunable_units_mut();
    for m in members {
        let unit = units.get_mut(m.layer).ok_or_else(|| Error::config(format!("no prunable layer {}", m.layer)))?;
        let norm = unit.params.norm_mut()?;
        *norm.gamma.data_mut().get_mut(m.channel).ok_or_else(|| Error::config("channel out of range"))? = T::zero();
    }
    Ok(())
}

/// Zeroes the filter and bias that produce every member channel.
pub fn zero_filter<T: Scalar>(net: &mut Network<T>, members: &[ChannelRef]) -> Result<()> {
    let mut units = net.prunable_units_mut();
    for m in members {
        let unit = units.get_mut(m.layer).ok_or_else(|| Error::config(format!("no prunable layer {}", m.layer)))?;
        let c = unit.params.out_channels();
        if m.channel >= c {
            return Err(Error::config("channel out of range"));
        }
        let per = unit.params.weight.len() / c;
        unit.params.weight.data_mut()[m.channel * per..(m.channel + 1) * per].fill(T::zero());
        unit.params.bias.data_mut()[m.channel] = T::zero();
    }
    Ok(())
}

/// For each coupling group: zero its γ, evaluate the train-mode loss on
/// the fixed batch, and record `|ΔL|`. Groups run in parallel on private
/// copies; the caller's network is never touched.
pub fn oracle_delta_loss<T: Scalar>(
    net: &Network<T>,
    groups: &[CouplingGroup],
    batch: &Tensor<T>,
    target: &Target<T>,
    loss: impl Into<Objective>,
) -> Result<Vec<OracleRecord>> {
    let loss = loss.into();
    let base = batch_loss(net, batch, target, loss)?;
    let deltas = groups
        .par_iter()
        .map(|g| {
            let mut probe = net.clone();
            zero_gamma(&mut probe, &g.members)?;
            Ok((batch_loss(&probe, batch, target, loss)? - base).abs())
        })
        .collect::<Result<Vec<f64>>>()?;
    let keys: Vec<usize> = groups.iter().map(|g| g.id).collect();
    let ranks = rank_ascending(&deltas, &keys);
    Ok(groups
        .iter()
        .zip(deltas)
        .zip(ranks)
        .map(|((g, delta_loss), rank)| OracleRecord { group: g.id, members: g.members.clone(), delta_loss, rank })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotCheck {
    pub group: usize,
    pub loss_gamma_zero: f64,
    pub loss_filter_zero: f64,
}

impl SpotCheck {
    pub fn abs_diff(&self) -> f64 {
        (self.loss_gamma_zero - self.loss_filter_zero).abs()
    }
}

/// Compares γ-zeroing with zeroing the producing filter and bias on
/// `count` randomly chosen groups. In train mode a channel whose
/// pre-norm map is identically zero normalizes to zero, so both leave
/// exactly β behind.
pub fn structural_spot_check<T: Scalar>(
    net: &Network<T>,
    groups: &[CouplingGroup],
    batch: &Tensor<T>,
    target: &Target<T>,
    loss: impl Into<Objective>,
    count: usize,
    seed: u64,
) -> Result<Vec<SpotCheck>> {
    let loss = loss.into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, groups.len(), count.min(groups.len())).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|i| {
            let g = &groups[i];
            let mut a = net.clone();
            zero_gamma(&mut a, &g.members)?;
            let mut b = net.clone();
            zero_filter(&mut b, &g.members)?;
            Ok(SpotCheck {
                group: g.id,
                loss_gamma_zero: batch_loss(&a, batch, target, loss)?,
                loss_filter_zero: batch_loss(&b, batch, target, loss)?,
            })
        })
        .collect()
}

/// Which feature map the first-order criterion is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaylorSite {
    /// Pre-norm map `F̃`, removal to zero. Under train-mode batch norm
    /// the incoming gradient is orthogonal to every per-channel affine
    /// function of `F̃`, so this score vanishes up to a factor ε/(σ²+ε).
    PreBn,
    /// Post-norm map `F̄`, removal to `β` (what zeroing the pre-norm map
    /// or γ leaves behind).
    #[default]
    PostBn,
    /// Activation after the ReLU, removal to zero.
    Activation,
}

/// `|Σ ∂L/∂F · ΔF|` per channel, summed over batch and spatial positions,
/// with `ΔF` the change that removing the channel causes at `site`.
/// Returned as one vector per prunable layer.
pub fn feature_taylor_saliency<T: Scalar>(
    net: &Network<T>,
    batch: &Tensor<T>,
    target: &Target<T>,
    loss: impl Into<Objective>,
    site: TaylorSite,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let trace = net.forward(batch, Mode::Train, &mut tape)?;
    let (l, _) = loss.into().record(&mut tape, trace.output, target)?;
    tape.backward(l)?;
    let units = net.prunable_units();
    let mut out = Vec::with_capacity(trace.layers.len());
    for (unit, lt) in units.iter().zip(&trace.layers) {
        let var = match site {
            TaylorSite::PreBn => lt.pre_bn,
            TaylorSite::PostBn => lt.post_bn,
            TaylorSite::Activation => lt.output,
        };
        let value = tape.value(var);
        let grad = tape.grad_or_zeros(var);
        let [n, c, h, w] = value.dims4()?;
        let plane = h * w;
        let beta = unit.params.norm()?.beta.data();
        let mut scores = vec![0.0f64; c];
        for s in 0..n {
            for (j, score) in scores.iter_mut().enumerate() {
                let off = (s * c + j) * plane;
                let shift = if site == TaylorSite::PostBn { beta[j].as_f64() } else { 0.0 };
                *score += value.data()[off..off + plane]
                    .iter()
                    .zip(&grad[off..off + plane])
                    .map(|(&v, &g)| g.as_f64() * (v.as_f64() - shift))
                    .sum::<f64>();
            }
        }
        out.push(scores.into_iter().map(f64::abs).collect());
    }
    Ok(out)
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::config(format!("spearman: lengths {} and {} differ", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::config("spearman needs at least two values"));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::numeric("spearman is undefined for a constant ranking"));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Indices of the `k` smallest values, ties to the smaller index.
pub fn bottom_k(values: &[f64], k: usize) -> Vec<usize> {
    let keys: Vec<usize> = (0..values.len()).collect();
    let ranks = rank_ascending(values, &keys);
    let mut out: Vec<usize> = (0..values.len()).filter(|&i| ranks[i] < k).collect();
    out.sort_unstable();
    out
}

/// Size of the intersection of the bottom-`k` sets of two scorings.
pub fn bottom_k_overlap(a: &[f64], b: &[f64], k: usize) -> usize {
    let sb = bottom_k(b, k);
    bottom_k(a, k).iter().filter(|i| sb.binary_search(i).is_ok()).count()
}

pub const CSV_HEADER: &str = "layer,channel,group,delta_loss,rank";

/// One row per member channel; members of a group share its values.
pub fn to_csv(records: &[OracleRecord]) -> String {
    let mut rows: Vec<(ChannelRef, &OracleRecord)> =
        records.iter().flat_map(|r| r.members.iter().map(move |&m| (m, r))).collect();
    rows.sort_by_key(|(m, _)| *m);
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (m, r) in rows {
        out.push_str(&format!("{},{},{},{},{}\n", m.layer, m.channel, r.group, sig9(r.delta_loss), r.rank));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn bottom_k_sets() {
        assert_eq!(bottom_k(&[0.3, 0.1, 0.2, 0.1], 2), vec![1, 3]);
        assert_eq!(bottom_k_overlap(&[0.0, 1.0, 2.0, 3.0], &[3.0, 0.0, 1.0, 2.0], 2), 1);
    }
}
