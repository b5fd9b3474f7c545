//! Pretrain, learn hardest negatives, unlearn; plus evaluation, checkpoints and configuration.

mod checkpoint;
mod config;
mod metrics;
mod optim;
mod train;

pub use checkpoint::{
    inspect_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, EpochRecord, Phase,
    TensorEntry, CKPT_MAGIC, CKPT_VERSION,
};
pub use config::{Mode, RunConfig};
pub use metrics::{
    evaluate, evaluate_embeddings, histogram_csv, read_metrics, Histogram, MetricsLine, MetricsReport, MetricsSink,
    MetricsWriter, Recall, SimilarityStats, HIST_BINS,
};
pub use optim::{Adam, AdamHyper};
pub use train::{learn_negatives, pretrain, subsample, unlearn, unlearn_epochs, HN_GROUPS, PRETRAIN_GROUPS, UL_GROUPS};
