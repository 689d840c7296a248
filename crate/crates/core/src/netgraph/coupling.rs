//! Channel-space analysis: which channel positions must be pruned together.
//!
//! Every convolution opens a new channel space. Pooling and ReLU carry the
//! space through; a residual addition merges the two spaces it joins, so
//! position `j` of every merged space is one physical channel. Spaces that
//! end up merged with the network input or with a convolution lacking batch
//! norm are frozen: their channels are scored but never removed.

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::spec::{Activation, BlockKind, NetworkSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One channel of one prunable layer. `layer` counts Conv-BN layers only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChannelRef {
    pub layer: usize,
    pub channel: usize,
}

/// Channels that must be removed together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingGroup {
    pub id: usize,
    pub members: Vec<ChannelRef>,
    /// Tied to a stream that cannot shrink (the input, a plain conv).
    pub frozen: bool,
}

/// Where a linear layer's input rows come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlatOrigin {
    pub class: usize,
    pub channels: usize,
    /// Spatial positions per channel in the flattened vector (1 after gap).
    pub plane: usize,
}

/// Channel-space classes for every block of a spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    /// Class of the output space of each prunable layer.
    pub layer_class: Vec<usize>,
    /// Per block: class of its feature-map input, if any.
    pub block_input_class: Vec<Option<usize>>,
    /// Per block: class of its own conv output (conv blocks and projections).
    pub block_output_class: Vec<Option<usize>>,
    /// Per block: origin of the flat input of a linear layer.
    pub linear_origin: Vec<Option<FlatOrigin>>,
    /// Per class: whether its channels are frozen.
    pub frozen: Vec<bool>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn add(&mut self) -> usize {
        self.0.push(self.0.len());
        self.0.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a != b {
            let (lo, hi) = (a.min(b), a.max(b));
            self.0[hi] = lo;
        }
    }
}

#[derive(Clone, Copy)]
enum Flow {
    Map(usize),
    Flat(Option<FlatOrigin>),
}

impl Topology {
    pub fn analyze(spec: &NetworkSpec) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut uf = UnionFind(Vec::new());
        let mut frozen_spaces = Vec::new();
        let input_space = uf.add();
        frozen_spaces.push(true);
        let mut new_space = |frozen: bool, uf: &mut UnionFind| {
            frozen_spaces.push(frozen);
            uf.add()
        };

        let nb = spec.blocks.len();
        let mut block_in = vec![None; nb];
        let mut block_out = vec![None; nb];
        let mut linear_in: Vec<Option<FlatOrigin>> = vec![None; nb];
        let mut layer_space = Vec::new();
        let mut cur = Flow::Map(input_space);
        let mut skips = Vec::new();

        for (i, (b, sh)) in spec.blocks.iter().zip(&shapes).enumerate() {
            if let Flow::Map(s) = cur {
                block_in[i] = Some(s);
            }
            match b.kind {
                BlockKind::ConvBnRelu | BlockKind::ConvBn | BlockKind::Conv => {
                    let s = new_space(b.kind == BlockKind::Conv, &mut uf);
                    block_out[i] = Some(s);
                    if b.has_bn_conv() {
                        layer_space.push(s);
                    }
                    cur = Flow::Map(s);
                }
                BlockKind::ResidualBegin => {
                    let Flow::Map(s) = cur else { return Err(Error::config("residual on flat tensor")) };
                    if b.has_projection() {
                        let p = new_space(false, &mut uf);
                        block_out[i] = Some(p);
                        layer_space.push(p);
                        skips.push(p);
                    } else {
                        skips.push(s);
                    }
                }
                BlockKind::ResidualAdd => {
                    let skip = skips.pop().ok_or_else(|| Error::config("unbalanced residual"))?;
                    let Flow::Map(s) = cur else { return Err(Error::config("residual on flat tensor")) };
                    uf.union(s, skip);
                }
                BlockKind::Pool => {}
                BlockKind::Gap | BlockKind::Flatten => {
                    if let (Flow::Map(s), Activation::Map { c, h, w }) = (cur, sh.input) {
                        let plane = if b.kind == BlockKind::Gap { 1 } else { h * w };
                        cur = Flow::Flat(Some(FlatOrigin { class: s, channels: c, plane }));
                    }
                }
                BlockKind::Linear => {
                    if let Flow::Flat(origin) = cur {
                        linear_in[i] = origin;
                    }
                    cur = Flow::Flat(None);
                }
            }
        }

        let n_spaces = frozen_spaces.len();
        let mut frozen = vec![false; n_spaces];
        for s in 0..n_spaces {
            if frozen_spaces[s] {
                let r = uf.find(s);
                frozen[r] = true;
            }
        }
        let mut class = |s: usize| uf.find(s);
        Ok(Topology {
            layer_class: layer_space.iter().map(|&s| class(s)).collect(),
            block_input_class: block_in.iter().map(|s| s.map(&mut class)).collect(),
            block_output_class: block_out.iter().map(|s| s.map(&mut class)).collect(),
            linear_origin: linear_in
                .iter()
                .map(|o| o.map(|o| FlatOrigin { class: class(o.class), ..o }))
                .collect(),
            frozen: (0..n_spaces).map(|s| frozen[class(s)]).collect(),
        })
    }

    pub fn is_frozen_class(&self, class: usize) -> bool {
        self.frozen[class]
    }
}

/// Partitions every prunable channel into coupling groups.
///
/// Group ids follow first appearance in (layer, channel) order; channels
/// outside residual streams form singleton groups.
pub fn coupling_groups_for_spec(spec: &NetworkSpec) -> Result<Vec<CouplingGroup>> {
    let topo = Topology::analyze(spec)?;
    let layers = spec.prunable_layers();
    let mut index: std::collections::HashMap<(usize, usize), usize> = Default::default();
    let mut groups: Vec<CouplingGroup> = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let class = topo.layer_class[l];
        for j in 0..layer.channels {
            let member = ChannelRef { layer: l, channel: j };
            match index.get(&(class, j)) {
                Some(&g) => groups[g].members.push(member),
                None => {
                    index.insert((class, j), groups.len());
                    groups.push(CouplingGroup { id: groups.len(), members: vec![member], frozen: topo.frozen[class] });
                }
            }
        }
    }
    Ok(groups)
}

pub fn build_coupling_groups<T: Scalar>(net: &Network<T>) -> Result<Vec<CouplingGroup>> {
    coupling_groups_for_spec(net.spec())
}

/// Group id of every channel, indexed `[layer][channel]`.
pub fn group_lookup(groups: &[CouplingGroup], spec: &NetworkSpec) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = spec.prunable_layers().iter().map(|l| vec![usize::MAX; l.channels]).collect();
    for g in groups {
        for m in &g.members {
            out[m.layer][m.channel] = g.id;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(text: &str) -> NetworkSpec {
        NetworkSpec::parse(text).unwrap()
    }

    #[test]
    fn plain_chain_has_singleton_groups() {
        let s = spec("input 1 8 8\nconv_bn_relu 4 3 1 1\nconv_bn_relu 6 3 1 1\ngap\nlinear 3\n");
        let g = coupling_groups_for_spec(&s).unwrap();
        assert_eq!(g.len(), 10);
        assert!(g.iter().all(|g| g.members.len() == 1 && !g.frozen));
    }

    #[test]
    fn identity_residual_groups_last_bn_with_stream_producer() {
        let s = spec(
            "input 1 8 8\nconv_bn_relu 4 3 1 1\nresidual_begin\nconv_bn_relu 5 3 1 1\nconv_bn 4 3 1 1\nresidual_add\ngap\nlinear 2\n",
        );
        let g = coupling_groups_for_spec(&s).unwrap();
        // 4 stream positions (stem + last conv_bn) + 5 inner channels
        assert_eq!(g.len(), 9);
        let stream: Vec<_> = g.iter().filter(|g| g.members.len() == 2).collect();
        assert_eq!(stream.len(), 4);
        for (j, grp) in stream.iter().enumerate() {
            assert_eq!(grp.members, vec![ChannelRef { layer: 0, channel: j }, ChannelRef { layer: 2, channel: j }]);
        }
        let total: usize = s.prunable_layers().iter().map(|l| l.channels).sum();
        let merged: usize = g.iter().map(|g| g.members.len() - 1).sum();
        assert_eq!(g.len(), total - merged);
    }

    #[test]
    fn projection_joins_the_stream_group() {
        let s = spec(
            "input 1 8 8\nconv_bn_relu 4 3 1 1\nresidual_begin 6 1 2 0\nconv_bn_relu 6 3 2 1\nconv_bn 6 3 1 1\nresidual_add\ngap\nlinear 2\n",
        );
        let g = coupling_groups_for_spec(&s).unwrap();
        // layers: 0 stem(4), 1 proj(6), 2 inner(6), 3 last(6); proj and last share
        let pairs: Vec<_> = g.iter().filter(|g| g.members.len() == 2).collect();
        assert_eq!(pairs.len(), 6);
        assert!(pairs.iter().all(|g| g.members[0].layer == 1 && g.members[1].layer == 3));
        assert!(g.iter().all(|g| !g.frozen));
    }

    #[test]
    fn residual_on_the_input_is_frozen() {
        let s = spec("input 2 4 4\nresidual_begin\nconv_bn_relu 3 3 1 1\nconv_bn 2 3 1 1\nresidual_add\n");
        let g = coupling_groups_for_spec(&s).unwrap();
        let frozen: Vec<_> = g.iter().filter(|g| g.frozen).collect();
        assert_eq!(frozen.len(), 2);
        assert!(frozen.iter().all(|g| g.members == vec![ChannelRef { layer: 1, channel: g.members[0].channel }]));
    }

    #[test]
    fn linear_origin_tracks_flattened_channels() {
        let s = spec("input 1 4 4\nconv_bn_relu 3 3 1 1\npool 0 2 2 0\nflatten\nlinear 2\n");
        let t = Topology::analyze(&s).unwrap();
        let o = t.linear_origin[3].unwrap();
        assert_eq!((o.channels, o.plane), (3, 4));
        assert_eq!(o.class, t.layer_class[0]);
    }
}
