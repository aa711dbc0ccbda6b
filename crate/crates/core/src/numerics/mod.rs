//! Dense tensors, reverse-mode differentiation, layers, optimisers and the
//! seeded random source.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{cross_entropy, gelu, mlp_forward, softmax_stable, Init, Linear, Mlp, MlpParams};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Binding, ParamId, ParamStore};
pub use rng::{gaussian_sample, RandomSource};
pub use tensor::Tensor;
