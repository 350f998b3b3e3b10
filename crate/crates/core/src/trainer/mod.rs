//! Configuration, optimisation, evaluation protocols and plotting.

pub mod config;
pub mod eval;
pub mod optim;
pub mod plot;
pub mod train;

pub use config::{DataConfig, EvalConfig, Protocol, RunConfig, TrainConfig};
pub use eval::{evaluate, evaluate_constant_velocity, forecast, WindowForecast};
pub use optim::Adam;
pub use train::{batch_loss, fingerprint, sha256_hex, train, train_with, RunManifest, StepLog};
