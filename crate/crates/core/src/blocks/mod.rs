//! Composite blocks built from the tensor and scan primitives.

pub mod bifpn;
pub mod c2f;
pub mod gcst;
pub mod layers;
pub mod vss;

pub use bifpn::{fusion_coefficients, BiFpn, FusionNode};
pub use c2f::C2fSsm;
pub use gcst::{film, GcstBottleneck, Mixer, SkipFusion};
pub use layers::{from_tokens, to_tokens, Conv, DwSep, Linear, Norm, SsmLayer, UpConv};
pub use vss::VssBlock;
