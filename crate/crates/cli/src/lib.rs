//! Training and verification harness around the prgrad core: experiment
//! configs, dataset loading, the training loop, the Fashion-MNIST
//! ablation, the reduced CIFAR-10 comparison, angle statistics, and file
//! emission. The `prgrad` binary is a thin clap wrapper over these
//! modules; integration tests drive them directly.

pub mod ablation;
pub mod angles;
pub mod checkpoint;
pub mod cifar;
pub mod config;
pub mod datasets;
pub mod emit;
pub mod runner;
