//! Contrastive decoding for multimodal language models, with baseline
//! decoders, a synthetic model/renderer testbed, hallucination metrics and a
//! JSON-over-HTTP backend protocol with record and replay.

pub mod app;
pub mod backend;
pub mod convis;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod logits;
pub mod sampling;
pub mod testbed;

pub use error::{Error, Result};
