//! Optimization, training loop and evaluation.

pub mod metrics;
pub mod optim;
pub mod train;

pub use metrics::{error_trace, trace_csv, trace_svg, AccDevMode, MetricsReport, WindowRecord};
pub use optim::{adam_step, clip_lstm_gradients, ClipMode, Grads, LrSchedule, OptimConfig, OptimizerState};
pub use train::{
    accumulate_gradients, accumulate_step, class_weights_for, epoch_plan, evaluate, load_model, make_checkpoint, predict_distances, restore, train, LossContext, MicroBatch, TrainConfig,
    TrainOutcome, WindowStore,
};
