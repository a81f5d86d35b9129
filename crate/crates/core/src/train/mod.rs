//! Training loop, optimizers, learning-rate schedule and evaluation metrics.

mod metrics;
mod optim;
mod schedule;
mod trainer;

pub use metrics::{
    frame_metrics, mse_objective, per_frame_metrics, pixel_factor, reported_mse, ssim_image, FrameMetrics,
    PSNR_CAP_DB,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use schedule::{lr_at, ScheduleConfig};
pub use trainer::{
    evaluate, loss_and_grads, predict, split_sequences, EpochRecord, EvalReport, KeepBest, RunArtifacts, TrainConfig,
    TrainObserver, TrainSummary, Trainer, METRICS_HEADER,
};
