//! A small neural-network engine for operator surrogates and
//! physics-informed solvers: row-major tensors, a reverse-mode tape with
//! dense, convolution, upsampling and finite-difference operations, exact
//! input jets for dense networks, Adam, and a checksummed checkpoint format.

pub mod activation;
pub mod checkpoint;
pub mod container;
pub mod error;
pub mod exec;
pub mod graph;
pub mod jet;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod tensor;

pub use activation::Activation;
pub use error::{NnError, Result};
pub use exec::Execution;
pub use graph::{Gradients, Graph, JetLayout, Var};
pub use kernels::Stencil;
pub use jet::{input_jet, jet_graph, seed_jet, JetOutput};
pub use model::{init_network, ForwardTrace, LayerSpec, NetworkModel};
pub use optim::{Adam, AdamConfig, StepOutcome};
pub use tensor::Tensor;
