//! Snippet-level few-shot video domain adaptation.
//!
//! The crate trains a small snippet encoder and a shared classifier on
//! precomputed per-frame features from a labelled source domain plus `k`
//! labelled videos per class from a target domain. Training combines a
//! cross-entropy objective with semantic alignment (target prototypes,
//! cross-snippet consistency, interpolation consistency) and a statistical
//! discrepancy term (MMD or CORAL), with target snippets re-weighted by an
//! attention derived from their own prediction quality.
//!
//! Everything here is `no_std` + `alloc`; file formats and the command-line
//! driver live in the `ssalign` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod align;
pub mod data;
pub mod diffkernel;
mod error;
mod math;
pub mod model;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use crate::error::{Error, Result};
pub use crate::tensor::Tensor2;
