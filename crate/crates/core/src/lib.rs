//! EEG tokenization and language-model bridging at desk scale.
//!
//! The crate covers the whole pipeline: signal ingestion and preprocessing,
//! a hierarchical dual-stream encoder over a 10-20 montage, a vector-quantized
//! tokenizer, deterministic semantic profiling, a latent-expert refiner, a
//! toy causal backbone with low-rank adapters, and evaluation metrics. All
//! trainable pieces run on a small `f64` reverse-mode tape.

pub mod autograd;
pub mod checkpoint;
pub mod encoder;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod profiler;
pub mod refiner;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod topology;
pub mod training;
pub mod vq;

pub use autograd::{Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{Tensor, TensorError, TensorResult};
