//! Training and evaluation engine.

pub mod ablate;
pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod schedule;
pub mod train;

pub use data::{tokenize_bytes, unigram_entropy_bits, Corpus, VOCAB};
pub use metrics::{MetricsRow, MetricsSink};
pub use train::{evaluate, train, EvalResult, TrainConfig, Trainer};
