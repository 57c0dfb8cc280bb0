//! Operational shell: configuration, synthetic data, training, evaluation and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{RunConfig, SynthConfig};
pub use dataset::Dataset;
pub use eval::{evaluate, EvalReport, MetricsRecord};
pub use synth::{generate_dataset, Sample};
pub use train::{train, TrainOutcome, TrainState};
