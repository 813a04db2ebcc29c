//! In-context regression: task sampling, the transformer, training and
//! evaluation.

mod checkpoint;
mod model;
mod optim;
mod task;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, ParamEntry, MANIFEST_FILE, WEIGHTS_FILE};
pub use model::{Forward, Model, ModelConfig, ParamInfo};
pub use optim::{AdamW, AdamWConfig};
pub use task::{
    sample_batch, sample_prompt, sample_prompts, stream_rng, Batch, Domain, IclTaskConfig, LabelEncoding, Prompt,
};
pub use train::{
    eval_error_at_n, eval_error_with, gradient_errors, icl_loss, least_squares_prediction, mup_learning_rates, oracle_eval_error,
    train, train_from, write_metrics, MetricRecord, Precision, TrainConfig, TrainOutcome, DIVERGENCE_LOSS,
    METRICS_HEADER,
};
