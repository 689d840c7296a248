//! FLOPs and parameter accounting.
//!
//! Convention (per sample): a multiply-add is 2 FLOPs and biases count.
//! conv = 2·H'·W'·C_out·k²·C_in + H'·W'·C_out, batch norm = 2 per element,
//! ReLU = 1 per element, linear = 2·D·K + K, residual add = 1 per element
//! (plus its ReLU). Pooling, gap and flatten are counted as free.

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::spec::{Activation, BlockKind, BlockSpec, NetworkSpec};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsEntry {
    pub block: usize,
    pub kind: String,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub entries: Vec<FlopsEntry>,
    pub total_flops: u64,
    pub total_params: u64,
}

impl FlopsReport {
    /// This report's FLOPs relative to `baseline` (1.0 = unchanged).
    pub fn ratio(&self, baseline: &FlopsReport) -> f64 {
        self.total_flops as f64 / baseline.total_flops as f64
    }

    pub fn param_ratio(&self, baseline: &FlopsReport) -> f64 {
        self.total_params as f64 / baseline.total_params as f64
    }

    pub fn conv_flops(&self) -> u64 {
        self.entries.iter().filter(|e| e.kind.starts_with("conv") || e.kind == "residual_begin").map(|e| e.flops).sum()
    }
}

fn conv_cost(b: &BlockSpec, c_in: usize, out: Activation, bn: bool, relu: bool) -> (u64, u64) {
    let Activation::Map { c, h, w } = out else { return (0, 0) };
    let (c, pix, k2, c_in) = (c as u64, (h * w) as u64, (b.kernel * b.kernel) as u64, c_in as u64);
    let mut flops = 2 * pix * c * k2 * c_in + pix * c;
    let mut params = c * c_in * k2 + c;
    if bn {
        flops += 2 * c * pix;
        params += 2 * c;
    }
    if relu {
        flops += c * pix;
    }
    (flops, params)
}

pub fn count_flops_spec(spec: &NetworkSpec) -> Result<FlopsReport> {
    let shapes = spec.shapes()?;
    let mut entries = Vec::with_capacity(spec.blocks.len());
    for (i, (b, sh)) in spec.blocks.iter().zip(&shapes).enumerate() {
        let c_in = match sh.input {
            Activation::Map { c, .. } => c,
            Activation::Flat { d } => d,
        };
        let (flops, params) = match b.kind {
            BlockKind::ConvBnRelu => conv_cost(b, c_in, sh.output, true, true),
            BlockKind::ConvBn => conv_cost(b, c_in, sh.output, true, false),
            BlockKind::Conv => conv_cost(b, c_in, sh.output, false, false),
            BlockKind::ResidualBegin => match sh.projection {
                Some(p) => conv_cost(b, c_in, p, true, false),
                None => (0, 0),
            },
            BlockKind::ResidualAdd => (2 * sh.output.elements() as u64, 0),
            BlockKind::Linear => {
                let (d, k) = (c_in as u64, b.channels as u64);
                (2 * d * k + k, d * k + k)
            }
            BlockKind::Pool | BlockKind::Gap | BlockKind::Flatten => (0, 0),
        };
        entries.push(FlopsEntry { block: i, kind: b.kind.name().to_string(), flops, params });
    }
    let total_flops = entries.iter().map(|e| e.flops).sum();
    let total_params = entries.iter().map(|e| e.params).sum();
    Ok(FlopsReport { entries, total_flops, total_params })
}

/// Per-sample FLOPs of `net` at its spec's input resolution.
pub fn count_flops<T: Scalar>(net: &Network<T>) -> Result<FlopsReport> {
    count_flops_spec(net.spec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_single_channel_conv() {
        let s = NetworkSpec::parse("input 1 1 1\nconv 1 1 1 0\n").unwrap();
        let r = count_flops_spec(&s).unwrap();
        assert_eq!(r.total_flops, 3);
        assert_eq!(r.total_params, 2);
    }

    #[test]
    fn report_is_additive_and_self_ratio_is_one() {
        let s = NetworkSpec::parse("input 3 8 8\nconv_bn_relu 8 3 1 1\npool 0 2 2 0\nconv_bn_relu 16 3 1 1\ngap\nlinear 10\n")
            .unwrap();
        let r = count_flops_spec(&s).unwrap();
        assert_eq!(r.total_flops, r.entries.iter().map(|e| e.flops).sum::<u64>());
        assert_eq!(r.ratio(&r), 1.0);
        let net = Network::<f32>::build(&s, 0).unwrap();
        assert_eq!(r.total_params as usize, net.param_count());
    }
}
