//! Desk-scale laboratory for subject-invariant contrastive representation
//! learning on multichannel time-series windows.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense f64 tensors and a reverse-mode autodiff tape.
//! - [`augment`]: stochastic window augmentations producing positive pairs.
//! - [`synthgen`]: a controllable multi-subject, two-modality synthetic
//!   benchmark where subject identity is a strong nuisance factor.
//! - [`losses`]: the contrastive objectives (NT-Xent, SupCon, CMC) and their
//!   subject-invariant variants, with exact analytic embedding gradients.
//! - [`model`]: small conv encoder, projector and linear head.
//! - [`opt`]: Adam.
//! - [`harness`]: training loops, linear evaluation, finetuning, similarity
//!   distribution analysis and the loss-by-seed comparison matrix.
//! - [`verify`]: independent brute-force oracles and the self-check suite.

pub mod augment;
pub(crate) mod bytes;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod opt;
pub mod rng;
pub mod synthgen;
pub mod verify;

pub use error::{Error, Result};
