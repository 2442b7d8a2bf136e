//! Dense double-precision tensors, a reverse-mode differentiation record,
//! and the layers, losses, optimizer and schedule built on top of it.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Var};
pub use layers::{Activation, BiLstm, Ffn, Linear, LstmCell, LstmState};
pub use loss::{binary_cross_entropy, cross_entropy, focal_loss, PROB_EPS};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use params::{Gradients, LrGroup, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
