//! Downstream task protocols, benchmarks and metrics.

pub mod finetune;
pub mod ksp;
pub mod metrics;
pub mod ranking;
pub mod retrieval;
