//! Robust neural machine translation for ASR transcripts.
//!
//! A small transformer translation model trained jointly with a
//! discriminator over encoder states, so that automatic transcripts and their
//! manual counterparts map to indistinguishable representations, plus a
//! consistency loss that teaches the decoder to translate noisy input the way
//! it translates the clean transcript.

pub mod align;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod noise;
pub mod optim;
pub mod tensor;
pub mod text;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
