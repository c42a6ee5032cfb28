//! Extractive question answering over a transformer encoder, a residual
//! Bi-LSTM and windowed start/end position heads, trained with LoRA.
//!
//! The crate is self-contained: a small reverse-mode tensor library
//! ([`tape`]), a character tokenizer, the model, AdamW training, the
//! evaluation metrics, a synthetic disaster-QA generator and a versioned
//! binary checkpoint format.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod qa_head;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use model::{ModelConfig, Preset, QaModel};
pub use tensor::Tensor;
