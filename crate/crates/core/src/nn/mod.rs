//! A small dense network engine: layers, losses, backpropagation and optimizers.

mod layer;
mod loss;
mod network;
mod optim;

pub use layer::{validate_layers, LayerSpec, MlpSpec};
pub use loss::{consistency_loss, cross_entropy, LossBreakdown, PROB_FLOOR};
pub use network::{softmax_backward, softmax_rows, DenseParams, Mode, Network, Trace};
pub use optim::{
    lr_schedule_update, Algorithm, OptimizerConfig, OptimizerState, ScheduleOutcome, ADAGRAD_EPS,
    ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
