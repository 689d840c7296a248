//! Network construction, forward pass, coupling analysis, FLOPs and persistence.

pub mod checkpoint;
pub mod coupling;
pub mod flops;
pub mod network;
pub mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint, stored_dtype};
pub use coupling::{build_coupling_groups, ChannelRef, CouplingGroup, Topology};
pub use flops::{count_flops, count_flops_spec, FlopsEntry, FlopsReport};
pub use network::{BatchNormParams, ConvUnit, Layer, LayerTrace, Network, ParamSet, Trace};
pub use spec::{Activation, BlockKind, BlockSpec, NetworkSpec, PrunableLayer};
