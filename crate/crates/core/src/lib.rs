//! Core algorithms for operation-chain forensics.
//!
//! This crate is `no_std` (with `alloc`) so the numerical pieces can be
//! embedded anywhere; file formats, dataset management and the command line
//! live in the `opchain` crate.
//!
//! Modules:
//! - [`image`]: 8-bit image buffers, grayscale conversion, patch extraction.
//! - [`ops`]: the operation dictionary, chains and chain enumeration.
//! - [`filters`]: the cross-channel RGB texture-suppression bank, SRM/CCL baselines
//!   and neighborhood correlation.
//! - [`analytics`]: channel correlation and histogram statistics.
//! - [`nn`]: a small CPU tensor/layer library and the two-stream fusion network.
//! - [`metrics`]: chain label codec, accuracy, ALMS and BLEU.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analytics;
pub mod error;
pub mod filters;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod rng;

pub use error::{Error, Result};
pub use image::{ImageBuffer, Patch, PatchMode, PatchSpec, Plane};
pub use ops::{Chain, OpKind, Operation};
