//! Desk-scale simulator and trainer for multi-user deep joint source-channel
//! coding (D-JSCC) over noisy wireless channels.
//!
//! A base-station encoder compresses images into a short latent block that is
//! transmitted over an AWGN or Rayleigh-fading channel and reconstructed by a
//! set of heterogeneous user decoders. The crate provides:
//!
//! - a small deterministic reverse-mode autodiff core ([`tape`]),
//! - the layer vocabulary the networks are assembled from ([`layers`]),
//! - the analog channel model with power normalization ([`channel`]),
//! - encoder/decoder builders for five architectures ([`models`]),
//! - the two-stage anchor training framework plus iterative and simultaneous
//!   baselines, and a catastrophic-forgetting measurement harness
//!   ([`training`]),
//! - PSNR / MS-SSIM image quality metrics ([`metrics`]),
//! - image ingestion and a procedural synthetic dataset ([`data`]),
//! - experiment configuration, orchestration and CSV/SVG reporting
//!   ([`config`], [`experiment`], [`report`]).
//!
//! Everything is `f64` and bit-reproducible: the same seed and configuration
//! produce byte-identical checkpoints and reports.

#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]
#![allow(clippy::manual_is_multiple_of)]

pub mod channel;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod report;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Rng, Tensor};
