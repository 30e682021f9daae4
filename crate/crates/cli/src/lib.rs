//! Pipeline driver behind the `covsev` binary: configuration, dataset and
//! cache handling, and the train-val / cross-validation scenarios.

pub mod config;
pub mod data;
pub mod lock;
pub mod pipeline;
pub mod predictions;
