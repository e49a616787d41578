//! Loss, optimizers, the epoch loop, split protocols and metrics.

pub mod loss;
pub mod metrics;
pub mod optim;
pub mod protocol;
pub mod report;
pub mod split;
mod trainer;

pub use loss::{bce_loss, logistic, softplus};
pub use metrics::{compute_metrics, mean_metrics, MeanMetrics, Metrics};
pub use optim::{Adam, AdamConfig, Lookahead, Optimizer};
pub use protocol::{run_plan, run_shuffled, run_temporal, RunResult, ShuffledReport, TemporalReport, DEFAULT_REPETITIONS};
pub use split::{split_shuffled, split_temporal, Protocol, SplitPlan, TemporalSplit, TEST_YEAR, TRAIN_YEAR};
pub use trainer::{evaluate, train, train_from, AppScore, EpochRecord, Evaluation, TrainConfig, TrainOutcome};
