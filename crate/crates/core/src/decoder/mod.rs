//! Miniature encoder-decoder language model with prompts, adapters and
//! decoding.

pub mod decoding;
pub mod dora;
pub mod model;
pub mod prompt;
pub mod tokenizer;
