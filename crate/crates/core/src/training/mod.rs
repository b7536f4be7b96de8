//! Optimisation, metrics and the training loop.

mod ablation;
mod adam;
mod config;
mod metrics;
mod trainer;

pub use ablation::{ablation_report, run_ablations, write_metrics_csv, AblationRow};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use config::TrainConfig;
pub use metrics::{ClassScores, Metrics};
pub use trainer::{
    batch_gradients, encode_all, evaluate, evaluate_encoded, split_validation, stream_rng, train, train_step,
    BatchGrads, EpochRecord, Split, TrainOutcome,
};
