//! Lifelong model editing with a mixture of LoRAs.
//!
//! A small causal transformer hosts mixture-of-LoRA modules on the FFN
//! down-projections of a contiguous block range. Each edit is pre-assigned a
//! distinct LoRA allocation that a guided loss teaches the routers to pick;
//! at inference the allocation code of an input is compared against the
//! stored edit codes by Hamming distance and far inputs bypass the editor.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod deferral;
pub mod error;
pub mod experiment;
pub mod gradsuite;
pub mod guided;
pub mod io;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod pretrain;
pub mod rng;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
