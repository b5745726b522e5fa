//! Bilevel training: episodes, meta-gradients, optimizers and the training loop.

pub mod bilevel;
pub mod checkpoint;
pub mod config;
pub mod episode;
pub mod optim;
pub mod problem;
pub mod schedule;
pub mod trainer;

pub use bilevel::{meta_gradient, BilevelProblem, InnerConfig, MetaGradient};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use trainer::{train, TrainOutcome};
