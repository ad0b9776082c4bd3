//! Hallucination detection from recorded LLM inference states.
//!
//! A trace set stores per-token attention, hidden states, FFN activations
//! and logit-lens statistics for labeled responses. Features are extracted
//! per token unit, classifiers are trained on them, and unit decisions are
//! combined into response decisions.

pub mod cli;
pub mod detect;
pub mod error;
pub mod eval;
pub mod features;
pub mod selection;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
