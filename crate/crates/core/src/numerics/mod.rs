//! Dense kernels, parameter storage, reverse-mode gradients and a
//! finite-difference oracle.

pub mod checkpoint;
pub mod gradcheck;
pub mod linear;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod vars;

pub use gradcheck::{compare_gradients, finite_diff_grad, finite_diff_grad_guarded, GradCheckReport};
pub use linear::{cross_entropy_value, linear_forward, mlp_forward, softmax, Activation, LinearParams, MlpParams};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor2;
pub use vars::{LinearHandle, LinearVars, MlpHandle, MlpVars};
