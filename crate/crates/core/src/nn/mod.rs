//! Dense tensors, reverse-mode gradients and the Adam optimizer.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{check_gradients, finite_difference_check, FD_STEP};
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use params::{ParamId, ParameterStore};
pub use tensor::Tensor;
