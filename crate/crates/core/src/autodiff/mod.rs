//! Minimal dense-array engine with reverse-mode differentiation.
//!
//! A [`Graph`] is an eager tape over a borrowed [`ParamStore`]: ops compute
//! their values immediately and [`Graph::backward`] replays the tape in
//! reverse. Everything is `f64`.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;
mod train;

pub use gradcheck::{gradient_check, relative_error, GradCheckReport, RELATIVE_FLOOR};
pub use graph::{forward_backward, Graph, Var};
pub use optim::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use params::{Gradients, ParamId, ParamRecord, ParamStore};
pub use tensor::Tensor;
pub use train::{fit, Objective, TrainConfig, TrainingStats};
