//! Core library for a learned visual-token compression pipeline:
//! a frozen patch encoder, a trainable compressor (separable convolutions,
//! element-guided reweighting, adaptive pooling, Transformer refinement),
//! a small frozen autoregressive decoder with LoRA adapters, a joint
//! training loop, an analytic prefill-cost model, and an experiment harness
//! with baselines, sweeps and ablations over a synthetic page corpus.

pub mod compressor;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod flops;
mod nn;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Array, ParamId, Params, Tape, Var};
