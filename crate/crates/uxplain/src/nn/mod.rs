//! Minimal neural-network substrate: layers, networks, training,
//! checkpoints. Deterministic under a seed, with exact backpropagation to
//! both parameters and inputs.

pub mod arch;
pub mod checkpoint;
pub mod layer;
pub mod network;
pub mod train;

pub use layer::{Layer, LayerNoise, LayerSpec, ParamGrad, ReluRule};
pub use network::{Head, Mode, Network, NoiseRealization, Tape};
pub use train::{train, softmax, Optimizer, Targets, TrainConfig, TrainHistory};
