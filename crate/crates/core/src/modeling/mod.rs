//! Model zoo: feature extractor / head split, multi-head classifiers,
//! bias-capturing models and projection layers.

mod bias;
mod network;
mod projection;
pub mod train;

pub use bias::{train_bias_capturing_model, train_vanilla_model, BiasCapturingModel};
pub use network::{build_model, per_head, Forward, Mode, ModelSpec, Network, BN_EPS, BN_MOMENTUM};
pub use projection::ProjectionLayer;
