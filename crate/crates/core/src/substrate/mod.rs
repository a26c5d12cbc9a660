//! Differentiable-model substrate shared by every learning head.

pub mod gradcheck;
mod graph;
mod nn;
mod noise;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_params, GradcheckReport};
pub use graph::{Graph, NodeId, SeqLayout};
pub use nn::{
    sinusoidal_positions, tiled_positions, Activation, LayerNorm, Linear, Mlp, SeqEncoder,
    SeqEncoderConfig,
};
pub use noise::{Mode, NoiseKey};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::Real;
pub use tensor::Tensor;
