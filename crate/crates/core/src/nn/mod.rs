//! CPU network stack: layers with hand-written backward passes, a small CNN
//! and a torchvision-compatible ResNet-50, and first-order optimizers.
//!
//! Everything runs single-threaded in a fixed order, so a run is bit-for-bit
//! reproducible for a given seed on one platform.

pub mod layers;
mod network;
mod optim;

pub(crate) use network::{read_safetensors, write_safetensors};
pub use network::{Backbone, Forward, Network};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETAS, ADAM_EPS, SGD_MOMENTUM};
