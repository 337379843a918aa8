//! morphkit: learned input-space masking against spurious correlations.
//!
//! The core idea: a small convolutional autoencoder (the transformation
//! network) produces a per-pixel mask `m` for each input image; the classifier
//! only ever sees the morphed input `ψ(x) = m ⊙ x`. The mask is trained
//! jointly with the classifier under a contrastive objective — a multi-scale
//! structural-similarity (MS-SSIM) triplet loss that pushes `ψ(x)` toward
//! same-class examples and away from other-class examples — so the network
//! learns to keep the pixels that matter for the label and to suppress
//! spuriously correlated background content. An optional variational
//! information bottleneck (VIB) on the classifier head composes with the
//! masking objective.
//!
//! Everything is built on a small fp64 reverse-mode autodiff core
//! ([`tensor`]), with deterministic seeding end to end: identical config and
//! seed reproduce training bit for bit.
//!
//! The crate is organized as a library plus one thin CLI binary. Most
//! capabilities are demonstrated by a runnable example under `examples/`.

pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod rng;
pub mod ssim;
pub mod tensor;
pub mod tnet;

pub mod cli;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{ParamStore, Tape, Tensor, Value};
