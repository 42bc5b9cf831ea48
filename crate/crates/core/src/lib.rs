//! Video-language training and general video recognition benchmarks over
//! precomputed frame and sentence embeddings.

pub mod autodiff;
pub mod bank;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod head;
pub mod metrics;
pub mod model;
pub mod openmax;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod probe;
pub mod splits;
pub mod synth;
pub mod tensor;
pub mod tsr;

pub use error::{Error, Result};
