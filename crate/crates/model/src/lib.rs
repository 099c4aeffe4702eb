//! Transformer runtime for the probing toolkit: checkpoint loading,
//! tokenizers, joint knowledge-embedding fine-tuning and the sentiment head.

pub mod config;
pub mod encoder;
pub mod error;
pub mod head;
pub mod ke;
pub mod runtime;
pub mod tokenizer;
pub mod train;

pub use config::{Family, ModelConfig};
pub use error::{ModelError, Result};
pub use ke::KeVariant;
pub use runtime::Transformer;
pub use tokenizer::Tokenizer;
pub use train::{finetune, TrainConfig, TrainingLog};
