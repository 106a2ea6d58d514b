//! Future-conditioned story generation.
//!
//! The crate is `no_std` (with `alloc`) so the algorithmic pieces can be embedded
//! anywhere; file formats, the CLI and the HTTP service live in the `futuresight`
//! companion crate. The default `std` feature only enables runtime CPU feature
//! detection in the matrix kernels.
//!
//! Pipeline at a glance:
//!
//! * [`corpus`] splits stories into sentences, builds sentence-level IDF statistics
//!   and nominates the most informative of the sentences following the context as
//!   the *future* event, together with its distance.
//! * [`model`] is a small encoder/decoder pair: the encoder pools the
//!   `[AGG] distance [SEP] future` sequence at position 0, a nonlinear projection turns
//!   that into one memory vector per decoder layer, and each decoder layer may attend to
//!   its memory slot in addition to the causal token positions.
//! * [`training`] optimizes the reconstruction objective with gradient accumulation.
//! * [`generation`] runs interactive sessions where the future can be swapped at any time.
//! * [`evaluation`] holds conditioning diagnostics, the synthetic oracle suite and the
//!   three-class human evaluation kit.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod corpus;
mod error;
pub mod evaluation;
pub mod generation;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
