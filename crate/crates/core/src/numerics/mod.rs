//! Tensor arithmetic, reverse-mode differentiation and the neural layers
//! used by the enhancement model.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub(crate) mod linalg;
pub mod lstm;
pub mod norm;
pub mod params;
pub mod rng;
pub mod tensor;

pub use conv::{ConvGeometry, LayerKind, LayerSpec};
pub use gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use lstm::LstmWeights;
pub use norm::{BatchStats, BN_MOMENTUM, NORM_EPS};
pub use params::{BufferId, ParamId, ParamStore, Parameter};
pub use rng::SeedTree;
pub use tensor::Tensor;
