//! Minimal deterministic neural-network engine: layers with hand-written
//! adjoints, optimizers, and a finite-difference oracle to check them.

pub mod gradcheck;
pub mod layers;
pub mod optim;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use layers::{ConcatChannels, Conv2d, Gradients, Layer, LayerKind, MaxPool2x2, Relu, Upsample2x};
pub use optim::{Optimizer, OptimizerKind};
