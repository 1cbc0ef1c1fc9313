//! Model-compression toolchain and emulated int8 accelerator runtime for
//! onboard multispectral cloud detection.
//!
//! The crate covers the whole flow: a layer-graph IR with builders for four
//! cloud-detection CNNs, a float reference runtime with reverse-mode
//! gradients and Adam training, per-tensor power-of-two int8 quantization
//! with a bit-exact integer executor, structured channel pruning with dense
//! graph rewriting, an execution planner with an accelerator buffer model,
//! and a synthetic Sentinel-2-like data pipeline.

pub mod blob;
pub mod cli;
pub mod data;
pub mod deploy;
pub mod error;
pub mod eval;
pub mod ir;
pub mod prune;
pub mod quant;
pub mod rng;
pub mod runtime;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

