//! Informed multi-task classification of tweets.
//!
//! A sentence embedding feeds a sarcasm head and a dialect head; the
//! sentiment head sees the embedding concatenated with those heads' outputs.
//! Every design axis of that architecture is configurable: hidden depth,
//! which vectors the auxiliary heads expose, which heads inform the
//! sentiment head, softmax on the exposed outputs, how far the sentiment
//! loss propagates back into the auxiliary heads, and the epoch-level task
//! schedule.
//!
//! Module map:
//!
//! - [`dataset`]: CSV loading, label normalization, splits, statistics, synthetic data.
//! - [`embeddings`]: the embedding provider interface, SEB1 tables, the toy encoder.
//! - [`compute`]: linear layers, softmax, losses, gradient gates.
//! - [`model`]: the network, its baselines and the SMC1 checkpoint format.
//! - [`training`]: schedules, Adam, the training loop.
//! - [`metrics`]: confusion matrices, FPN / FSar / WFS, evaluation.
//! - [`cli`]: the `saids` command-line front end.

pub mod cli;
pub mod compute;
pub mod dataset;
pub mod embeddings;
pub mod metrics;
pub mod model;
pub mod training;

pub use dataset::{Dataset, Dialect, LabeledTweet, Sarcasm, Sentiment, SplitRole};
pub use embeddings::{EmbeddingProvider, EmbeddingTable, ToyEncoder};
pub use metrics::{evaluate, EvalReport};
pub use model::{
    build_baseline, build_model, BackpropMode, Exposure, Informed, ModelConfig, SaidsModel,
};
pub use training::{train, Schedule, TrainConfig, TrainTrace};
