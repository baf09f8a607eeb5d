//! Minimal dense neural-network core: matrices, one-hidden-layer MLPs,
//! exact backpropagation, Adam, and a bit-exact checkpoint container.
//! The scorer, bias probe, discriminator, and feature transforms are all
//! built from these pieces.

mod adam;
mod checkpoint;
mod matrix;
mod mlp;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use matrix::Matrix;
pub use mlp::{
    bce_loss, gradient_check, mlp_backward, mlp_forward, mse_loss, sigmoid, ForwardCache, MlpGrads,
    MlpParams, OutputActivation, BCE_EPS,
};
