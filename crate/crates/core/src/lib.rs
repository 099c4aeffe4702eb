//! Simile property probing.
//!
//! Builds multiple-choice cloze probes from closed similes (`as ADJ as a NOUN`),
//! scores masked language models on them, and provides the baselines,
//! component ablations and representation analyses used to study them.

pub mod analysis;
pub mod distractor;
pub mod error;
pub mod eval;
pub mod kb;
pub mod lm;
pub mod mining;
pub mod record;
pub mod sentiment;
pub mod stub;

pub use error::*;
pub use record::{Category, Position, SimileRecord, Source, Span, Spans};
