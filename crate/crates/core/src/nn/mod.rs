//! Differentiable building blocks: tape, layers, parameters and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;

pub use gradcheck::{check_gradients, GradReport};
pub use layers::{gaussian_kl, gaussian_kl_var, reparam_sample, softmax, Dense, GruCell, Mlp};
pub use params::{Adam, Bound, Gradients, Init, ModelParams, ParamGroup, ParamId, Tensor};
pub use tape::{Activation, Mat, Tape, Var};
