//! Dense numeric kernels, the recording graph, and gradient verification.

pub mod gradcheck;
pub mod graph;
pub mod matrix;

pub use gradcheck::{finite_diff_check, GradCheckError};
pub use graph::{ffn_residual, mlp2, Graph, NodeId, ParamId, ParamStore, Parameter};
pub use matrix::{masked_softmax, MaskedSoftmax, Matrix, LAYER_NORM_EPS};
