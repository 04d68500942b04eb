//! Models, optimizer, schedule and the training loop.

mod model;
mod optim;
mod train;

pub use model::{build_model, Architecture, Forward, Model, ModelConfig, NoiseType, Param, INIT_STREAM};
pub use optim::{cosine_lr, sgd_step, OptimizerConfig, OptimizerState, ScheduleConfig};
pub use train::{
    evaluate, train, DivergenceInfo, EpochRecord, Evaluation, TrainConfig, TrainReport, NOISE_STREAM,
    SHUFFLE_STREAM,
};
