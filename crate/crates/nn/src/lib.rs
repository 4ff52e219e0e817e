//! Minimal `f64` autodiff for desk-scale training: a define-by-run tape,
//! convolution/attention/STFT operators, a handful of layers, and Adam/RAdam.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod layers;
pub mod linalg;
pub mod optim;
pub mod par;
pub mod params;
pub mod spectral;
pub mod tensor;

pub use graph::{Grads, Graph, Unary, Var};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Bound, GradSet, ParamId, ParamStore};
pub use spectral::StftConfig;
pub use tensor::Tensor;
