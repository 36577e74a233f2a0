//! Detection-gated video analysis: sample frames, keep the ones a detector
//! flags, describe them with a vision-language model, and summarise or query
//! the resulting per-frame corpus.

pub mod config;
pub mod corpus;
pub mod eval;
pub mod gate;
pub mod ingest;
pub mod media;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod summarize;
pub mod vlm;
