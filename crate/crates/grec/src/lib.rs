//! GRec: a multi-task recommender with multi-modal wide-and-deep input
//! encoding, parallel transformer blocks with multi-query attention, and
//! a sparse mixture-of-experts layer routed at token, sentence, task, or
//! task-sentence granularity, plus a benchmark harness for routing-cost
//! and scalability measurements.

pub mod attention;
pub mod commands;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod nn;
pub mod param;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
