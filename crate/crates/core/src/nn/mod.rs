//! Minimal f64 neural-network substrate: tensors, named parameters, a differentiation
//! tape with the handful of ops the tagger needs, and Adam.

pub mod gradcheck;
mod graph;
pub mod lstm;
mod optim;
mod params;
mod tensor;

pub use graph::{argmax, softmax_rows, Graph, NodeId};
pub use lstm::{BiLstmParams, LstmParams};
pub use optim::Adam;
pub use params::{Grads, Param, ParamId, Params};
pub use tensor::Tensor;
