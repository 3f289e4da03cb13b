//! Text infilling by language modeling.
//!
//! Documents are parsed into a paragraph / sentence / word hierarchy
//! ([`corpus`]), spans are masked out at several granularities ([`masker`]),
//! and each (document, mask) pair is encoded for one of four strategies
//! ([`examples`]). A small decoder-only transformer ([`model`]) is trained on
//! those sequences, used to fill blanks ([`infill`]), and scored by perplexity
//! over the masked tokens only ([`eval`]).

pub mod config;
pub mod corpus;
pub mod eval;
pub mod infill;
pub mod examples;
pub mod masker;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tokenizer;
