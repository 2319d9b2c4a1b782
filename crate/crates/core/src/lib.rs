//! Core of a desk-scale laboratory for denoising-autoencoder pre-training of
//! vision transformers: split the patch grid into two disjoint halves,
//! inpaint each half's visual-word tokens from the other, and match the two
//! pooled descriptors with a symmetric InfoNCE loss.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, image decoding,
//! experiment orchestration and the command line live in the `splitmask`
//! companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod error;
mod real;

pub mod data;
pub mod diagnostics;
pub mod losses;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Gradients, Tape, Tensor, Var};
pub use real::{DType, Real};
