mod ablation;
mod adam;
mod loss;
mod metrics;
mod trainer;

pub use ablation::{run_ablation, AblationSetup, AblationTable, MeanStd, SeedRun, VariantResult, ABLATION_FORMAT_VERSION};
pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use loss::loss;
pub use metrics::{acc7_bin, compute, weighted_f1, MetricsReport};
pub use trainer::{
    batch_gradients, evaluate, log_header, pool, predict, to_jsonl, train, train_with, TrainConfig, TrainOutcome,
    LOG_FORMAT_VERSION,
};
