//! Normalizing flows: layers, support transforms and the density network.

pub mod layers;
pub mod network;
pub mod support;

pub use layers::{FlowLayer, LayerKind};
pub use network::{default_layer_count, DensityNetwork, NetOutput};
pub use support::{SupportKind, SupportTransform};
