//! Networks, the two training engines, loss and optimizer.

mod engine;
mod loss;
mod model;
mod private;
mod reference;
mod train;

pub use engine::{backward, forward, train_step, Engine, StepResult, Trace, Value};
pub use loss::{argmax_rows, loss_and_gradient, softmax_cross_entropy};
pub use model::{layer_tag, Gradient, LayerSpec, LinearParams, Model, ModelSpec, Network, MODEL_NAMES};
pub use private::{load_banks, prepare_banks, save_banks, LinearMode, Private};
pub use reference::{predict, Reference};
pub use train::{
    accuracy, data_owner_step, encode_batch, model_owner_step, recv_continue, reference_step, round_robin, send_continue,
    simulate, EpochStats, TrainConfig,
};
