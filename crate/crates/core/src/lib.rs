//! Deterministic federated-learning simulator built around an adaptive
//! sparse-quantization pipeline: EMA-threshold sparsification of
//! error-feedback–compensated updates, binary16 coding of the kept
//! coordinates, and server-side momentum aggregation, benchmarked against
//! dense and fixed-rate baselines.

pub mod compress;
pub mod data;
pub mod fedcore;
pub mod halfcodec;
pub mod harness;
pub mod model;
pub mod tensor;
