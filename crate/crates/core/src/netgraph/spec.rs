//! Declarative architecture description and its line-oriented text form.
//!
//! ```text
//! # comments run to end of line
//! name tiny_vgg
//! input 1 16 16
//! conv_bn_relu 16 3 1 1
//! pool 0 2 2 0
//! conv_bn_relu 32 3 1 1
//! gap
//! flatten
//! linear 10
//! ```
//!
//! Block lines are `kind out_channels kernel stride padding`; trailing
//! columns may be omitted (stride defaults to 1 for convolutions and to the
//! kernel for pooling, padding to 0). `residual_begin` with no columns opens
//! an identity skip; with columns it opens a skip through a 1-layer
//! `conv_bn` projection. `residual_add` closes the innermost skip and
//! applies ReLU to the sum.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    ConvBnRelu,
    /// Convolution and batch norm without a trailing ReLU (linear bottleneck).
    ConvBn,
    /// Convolution with bias only.
    Conv,
    ResidualBegin,
    ResidualAdd,
    /// Max pooling.
    Pool,
    /// Global average pooling.
    Gap,
    Flatten,
    Linear,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::ConvBnRelu => "conv_bn_relu",
            BlockKind::ConvBn => "conv_bn",
            BlockKind::Conv => "conv",
            BlockKind::ResidualBegin => "residual_begin",
            BlockKind::ResidualAdd => "residual_add",
            BlockKind::Pool => "pool",
            BlockKind::Gap => "gap",
            BlockKind::Flatten => "flatten",
            BlockKind::Linear => "linear",
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(self, BlockKind::ConvBnRelu | BlockKind::ConvBn | BlockKind::Conv)
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "conv_bn_relu" => BlockKind::ConvBnRelu,
            "conv_bn" => BlockKind::ConvBn,
            "conv" => BlockKind::Conv,
            "residual_begin" => BlockKind::ResidualBegin,
            "residual_add" => BlockKind::ResidualAdd,
            "pool" => BlockKind::Pool,
            "gap" => BlockKind::Gap,
            "flatten" => BlockKind::Flatten,
            "linear" => BlockKind::Linear,
            other => return Err(Error::config(format!("unknown block kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl BlockSpec {
    pub fn conv(kind: BlockKind, channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        BlockSpec { kind, channels, kernel, stride, padding }
    }

    pub fn bare(kind: BlockKind) -> Self {
        BlockSpec { kind, channels: 0, kernel: 0, stride: 0, padding: 0 }
    }

    pub fn pool(kernel: usize, stride: usize) -> Self {
        BlockSpec { kind: BlockKind::Pool, channels: 0, kernel, stride, padding: 0 }
    }

    pub fn linear(outputs: usize) -> Self {
        BlockSpec { kind: BlockKind::Linear, channels: outputs, kernel: 0, stride: 0, padding: 0 }
    }

    /// Whether a `residual_begin` carries a projection convolution.
    pub fn has_projection(&self) -> bool {
        self.kind == BlockKind::ResidualBegin && self.channels > 0
    }

    /// Whether this block owns a convolution followed by batch norm.
    pub fn has_bn_conv(&self) -> bool {
        matches!(self.kind, BlockKind::ConvBnRelu | BlockKind::ConvBn) || self.has_projection()
    }
}

/// Shape of the activation flowing between blocks (per sample).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Map { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

impl Activation {
    pub fn elements(self) -> usize {
        match self {
            Activation::Map { c, h, w } => c * h * w,
            Activation::Flat { d } => d,
        }
    }
}

/// Input/output activation of one block, plus the projection output for
/// `residual_begin` blocks that have one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShapes {
    pub input: Activation,
    pub output: Activation,
    pub projection: Option<Activation>,
}

/// A prunable convolution: one that is followed by batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrunableLayer {
    pub block: usize,
    pub channels: usize,
    /// ReLU directly follows the batch norm.
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    /// `[C, H, W]` of one input sample.
    pub input: [usize; 3],
    pub blocks: Vec<BlockSpec>,
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

impl NetworkSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut name = None;
        let mut input = None;
        let mut blocks = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::config(format!("spec line {}: {msg}", lineno + 1));
            let mut fields = line.split_whitespace();
            let head = fields.next().expect("non-empty line");
            let rest: Vec<&str> = fields.collect();
            let nums = || -> Result<Vec<usize>> {
                rest.iter().map(|f| f.parse::<usize>().map_err(|_| err(format!("`{f}` is not a non-negative integer")))).collect()
            };
            match head {
                "name" => {
                    if rest.len() != 1 {
                        return Err(err("expected `name <identifier>`".into()));
                    }
                    name = Some(rest[0].to_string());
                }
                "input" => match nums()?[..] {
                    [c, h, w] if c > 0 && h > 0 && w > 0 => input = Some([c, h, w]),
                    _ => return Err(err("expected `input C H W` with positive sizes".into())),
                },
                kind => {
                    let kind: BlockKind = kind.parse().map_err(|e: Error| err(e.to_string()))?;
                    let n = nums()?;
                    if n.len() > 4 {
                        return Err(err("too many columns".into()));
                    }
                    let col = |i: usize| n.get(i).copied();
                    let block = match kind {
                        BlockKind::ConvBnRelu | BlockKind::ConvBn | BlockKind::Conv => {
                            let (Some(c), Some(k)) = (col(0), col(1)) else {
                                return Err(err(format!("{} needs out_channels and kernel", kind.name())));
                            };
                            BlockSpec::conv(kind, c, k, col(2).unwrap_or(1), col(3).unwrap_or(0))
                        }
                        BlockKind::ResidualBegin if n.is_empty() || col(0) == Some(0) => BlockSpec::bare(kind),
                        BlockKind::ResidualBegin => {
                            let (Some(c), Some(k)) = (col(0), col(1)) else {
                                return Err(err("projection needs out_channels and kernel".into()));
                            };
                            BlockSpec::conv(kind, c, k, col(2).unwrap_or(1), col(3).unwrap_or(0))
                        }
                        BlockKind::Pool => {
                            let Some(k) = col(1) else { return Err(err("pool needs a kernel column".into())) };
                            BlockSpec::pool(k, col(2).unwrap_or(k))
                        }
                        BlockKind::Linear => {
                            let Some(c) = col(0) else { return Err(err("linear needs an output width".into())) };
                            BlockSpec::linear(c)
                        }
                        BlockKind::ResidualAdd | BlockKind::Gap | BlockKind::Flatten => BlockSpec::bare(kind),
                    };
                    blocks.push(block);
                }
            }
        }
        let spec = NetworkSpec {
            name: name.unwrap_or_else(|| "net".to_string()),
            input: input.ok_or_else(|| Error::config("spec is missing an `input C H W` line"))?,
            blocks,
        };
        spec.shapes()?;
        Ok(spec)
    }

    /// Canonical text form; `parse(to_text(s)) == s`.
    pub fn to_text(&self) -> String {
        let mut out = format!("name {}\ninput {} {} {}\n", self.name, self.input[0], self.input[1], self.input[2]);
        for b in &self.blocks {
            let line = match b.kind {
                BlockKind::ConvBnRelu | BlockKind::ConvBn | BlockKind::Conv => {
                    format!("{} {} {} {} {}", b.kind.name(), b.channels, b.kernel, b.stride, b.padding)
                }
                BlockKind::ResidualBegin if b.has_projection() => {
                    format!("residual_begin {} {} {} {}", b.channels, b.kernel, b.stride, b.padding)
                }
                BlockKind::Pool => format!("pool 0 {} {}", b.kernel, b.stride),
                BlockKind::Linear => format!("linear {}", b.channels),
                _ => b.kind.name().to_string(),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    /// Infers every block's activation shapes and validates the chain.
    pub fn shapes(&self) -> Result<Vec<BlockShapes>> {
        let [c, h, w] = self.input;
        let mut cur = Activation::Map { c, h, w };
        let mut skips: Vec<(usize, Activation)> = Vec::new();
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let err = |msg: String| Error::config(format!("block {i} ({}): {msg}", b.kind.name()));
            let input = cur;
            let mut projection = None;
            let conv_shape = |act: Activation| -> Result<Activation> {
                let Activation::Map { h, w, .. } = act else {
                    return Err(err("convolution after flatten".into()));
                };
                if b.channels == 0 || b.kernel == 0 || b.stride == 0 {
                    return Err(err("convolution needs positive channels, kernel and stride".into()));
                }
                match (conv_out(h, b.kernel, b.stride, b.padding), conv_out(w, b.kernel, b.stride, b.padding)) {
                    (Some(h), Some(w)) => Ok(Activation::Map { c: b.channels, h, w }),
                    _ => Err(err(format!("kernel {} does not fit {h}x{w}", b.kernel))),
                }
            };
            cur = match b.kind {
                BlockKind::ConvBnRelu | BlockKind::ConvBn | BlockKind::Conv => conv_shape(cur)?,
                BlockKind::ResidualBegin => {
                    if let Activation::Flat { .. } = cur {
                        return Err(err("residual stream must be a feature map".into()));
                    }
                    let skip = if b.has_projection() { conv_shape(cur)? } else { cur };
                    if b.has_projection() {
                        projection = Some(skip);
                    }
                    skips.push((i, skip));
                    cur
                }
                BlockKind::ResidualAdd => {
                    let Some((_, skip)) = skips.pop() else {
                        return Err(err("residual_add without a matching residual_begin".into()));
                    };
                    if skip != cur {
                        return Err(err(format!("joined streams differ: {skip:?} vs {cur:?}")));
                    }
                    cur
                }
                BlockKind::Pool => match cur {
                    Activation::Map { c, h, w } if b.kernel > 0 && b.stride > 0 && b.kernel <= h && b.kernel <= w => {
                        Activation::Map { c, h: (h - b.kernel) / b.stride + 1, w: (w - b.kernel) / b.stride + 1 }
                    }
                    _ => return Err(err("pool window does not fit the feature map".into())),
                },
                BlockKind::Gap => match cur {
                    Activation::Map { c, .. } => Activation::Flat { d: c },
                    Activation::Flat { .. } => return Err(err("gap needs a feature map".into())),
                },
                BlockKind::Flatten => Activation::Flat { d: cur.elements() },
                BlockKind::Linear => match cur {
                    Activation::Flat { .. } if b.channels > 0 => Activation::Flat { d: b.channels },
                    Activation::Flat { .. } => return Err(err("linear needs a positive output width".into())),
                    Activation::Map { .. } => return Err(err("linear needs flatten or gap first".into())),
                },
            };
            out.push(BlockShapes { input, output: cur, projection });
        }
        if let Some((i, _)) = skips.first() {
            return Err(Error::config(format!("residual_begin at block {i} is never closed")));
        }
        Ok(out)
    }

    pub fn output(&self) -> Result<Activation> {
        let [c, h, w] = self.input;
        Ok(self.shapes()?.last().map(|s| s.output).unwrap_or(Activation::Map { c, h, w }))
    }

    /// Convolutions followed by batch norm, in execution order.
    pub fn prunable_layers(&self) -> Vec<PrunableLayer> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.has_bn_conv())
            .map(|(i, b)| PrunableLayer { block: i, channels: b.channels, relu: b.kind == BlockKind::ConvBnRelu })
            .collect()
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NetworkSpec::parse(s)
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const VGG: &str = "# tiny\nname t\ninput 1 8 8\nconv_bn_relu 8 3 1 1\npool 0 2 2 0\nconv_bn_relu 16 3\ngap\nflatten\nlinear 10\n";

    #[test]
    fn parses_and_round_trips() {
        let s = NetworkSpec::parse(VGG).unwrap();
        assert_eq!(s.blocks.len(), 6);
        assert_eq!(s.blocks[2], BlockSpec::conv(BlockKind::ConvBnRelu, 16, 3, 1, 0));
        let again = NetworkSpec::parse(&s.to_text()).unwrap();
        assert_eq!(again, s);
        assert_eq!(again.to_text(), s.to_text());
    }

    #[test]
    fn infers_shapes() {
        let s = NetworkSpec::parse(VGG).unwrap();
        let sh = s.shapes().unwrap();
        assert_eq!(sh[1].output, Activation::Map { c: 8, h: 4, w: 4 });
        assert_eq!(sh[2].output, Activation::Map { c: 16, h: 2, w: 2 });
        assert_eq!(sh[3].output, Activation::Flat { d: 16 });
        assert_eq!(sh[5].output, Activation::Flat { d: 10 });
    }

    #[test]
    fn residual_width_mismatch_is_rejected() {
        let bad = "input 3 8 8\nconv_bn_relu 8 3 1 1\nresidual_begin\nconv_bn 16 3 1 1\nresidual_add\n";
        assert!(matches!(NetworkSpec::parse(bad), Err(Error::Config(_))));
        let ok = "input 3 8 8\nconv_bn_relu 8 3 1 1\nresidual_begin 16 1 1 0\nconv_bn 16 3 1 1\nresidual_add\n";
        let s = NetworkSpec::parse(ok).unwrap();
        assert_eq!(s.prunable_layers().len(), 3);
        assert!(NetworkSpec::parse("input 3 8 8\nresidual_begin\n").is_err());
        assert!(NetworkSpec::parse("input 3 8 8\nresidual_add\n").is_err());
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(NetworkSpec::parse("conv_bn_relu 8 3\n").is_err());
        assert!(NetworkSpec::parse("input 1 4 4\nconv_bn_relu 8\n").is_err());
        assert!(NetworkSpec::parse("input 1 4 4\nwat 8 3\n").is_err());
        assert!(NetworkSpec::parse("input 1 4 4\nlinear 3\n").is_err());
        assert!(NetworkSpec::parse("input 1 4 4\nconv_bn_relu 8 7\n").is_err());
    }

    #[test]
    fn prunable_layers_record_relu() {
        let s = NetworkSpec::parse("input 1 4 4\nconv_bn_relu 4 3 1 1\nconv_bn 4 3 1 1\nconv 1 3 1 1\n").unwrap();
        let p = s.prunable_layers();
        assert_eq!(p.len(), 2);
        assert!(p[0].relu);
        assert!(!p[1].relu);
    }
}
