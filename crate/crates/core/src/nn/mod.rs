//! A small CPU convolutional network engine with reverse-mode gradients.
//!
//! Networks are static DAGs ([`Network`]) built with [`GraphBuilder`].
//! Parameters are stored as `f32`; activations and gradients are computed in
//! `f64` so that gradient checks against finite differences are meaningful.

pub mod gemm;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use graph::{ForwardPass, Gradients, GraphBuilder, Keep, Mode, Network, Node, NodeId, Op, Param};
pub use tensor::Tensor;
