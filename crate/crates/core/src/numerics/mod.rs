//! Dense numerics for a small dropout MLP: parameters, forward/backward,
//! Adam, and the (temperature) softmax primitives.

mod adam;
mod checkpoint;
mod network;
mod params;
mod softmax;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{Activation, ForwardCache, ForwardOutput, Mode, Network};
pub use params::{Layer, ParameterSet, ShapeSignature};
pub use softmax::{
    floored_ln, floored_ln_grad, softmax_backward, softmax_rows, temperature_softmax,
    temperature_softmax_backward, LOG_FLOOR,
};
