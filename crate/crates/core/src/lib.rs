//! Multi-view driving question answering at desk scale: a reverse-mode
//! tensor core, a frozen convolutional encoder, a mixture-of-experts
//! visual tokenizer, an instruction adapter, a small encoder-decoder
//! language model, caption metrics and a synthetic scene corpus.

pub mod ablate;
pub mod adapter;
pub mod certify;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod image;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod nn;
pub mod params;
pub mod report;
pub mod saliency;
pub mod scenes;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
