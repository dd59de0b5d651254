//! Minimal dense network kernel: layers, exact backpropagation, losses and a
//! masked SGD update.

mod checkpoint;
mod gradcheck;
mod layer;
pub mod loss;
mod model;
mod optim;

pub use checkpoint::{checkpoint_precision, Checkpoint};
pub use gradcheck::{check_gradients, default_step, numeric_grad_check, relative_error, GradCheckReport, ParamRef, ParamSlot};
pub use layer::{Conv2d, Layer, Linear};
pub use loss::{cross_entropy, mse, single_head_cross_entropy, LossOutput};
pub use model::{ClassRange, ForwardCache, GradientSet, Model, ParamGrad};
pub use optim::sgd_step;
