//! A small, deterministic reverse-mode autodiff engine for convolutional
//! networks.
//!
//! All arithmetic is `f64` and single-threaded with a fixed accumulation
//! order, so two runs with the same inputs produce bit-identical results and
//! central finite differences can validate analytic gradients tightly.

pub mod archive;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{Binary, BnUpdate, Grads, Graph, Unary, Var};
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Mode};
pub use params::{Adam, AdamConfig, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
