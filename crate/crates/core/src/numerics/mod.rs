//! Differentiable kernel: reverse-mode tape, parameter store, layers,
//! Adam with cosine schedule, checkpoints and finite-difference checks.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;

pub use checkpoint::TensorFile;
pub use gradcheck::{check_gradients, GradCheckReport};
pub use nn::{dropout, mlp_apply, Activation, Context, Linear};
pub use optim::{adam_step, cosine_lr, AdamConfig, OptimizerState};
pub use params::{ParamEntry, ParamId, ParameterStore};
pub use tape::{log_softmax_rows, softmax_rows, Gradients, Mat, Tape, Var};
