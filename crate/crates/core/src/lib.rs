//! Allocation-only core of a retrieval-guided neural machine translation
//! system.
//!
//! A source sentence is first matched against a translation memory (the
//! training corpus) through an inverted index and an edit-distance re-ranker.
//! The retrieved pairs are then teacher-forced through the same attention
//! encoder-decoder to build a key-value memory which the decoder reads at
//! every step, either by blending hidden states (deep fusion) or by mixing a
//! copy distribution into the output (shallow fusion).
//!
//! Everything here is `no_std` + `alloc`; file formats, the training loop and
//! the command line live in the `segnmt` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod bleu;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod fuzzy;
pub mod index;
pub mod nmt;
pub mod param;
pub mod seg;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Token identifier within a [`corpus::Vocabulary`].
pub type TokenId = u32;
