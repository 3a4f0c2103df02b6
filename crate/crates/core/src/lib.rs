//! Desk-scale simulator for federated self-supervised learning (FSSL) with
//! an optimized imperceptible backdoor attack.
//!
//! The crate provides, end to end:
//! - the three-step federated round loop (broadcast, local contrastive
//!   training, size-weighted aggregation) with Dirichlet non-IID
//!   partitioning;
//! - a trainable image-to-image trigger injector optimized for stealth
//!   (sliced Wasserstein feature distance), color-space disentanglement from
//!   augmentations, and target-feature alignment;
//! - malicious local training with dual alignment and utility losses;
//! - evaluation (downstream probes, CA/BA/ASR, SSIM/PSNR, feature-space
//!   probes) and defense probes (STRIP, activation clustering, Krum,
//!   trimmed mean);
//! - an empirical checker for the FedAvg descent/convergence bound under a
//!   single deviating client.
//!
//! Everything is `f64`, seeded, and deterministic: identical configs and
//! seeds reproduce identical metric streams byte for byte.

pub mod error;
pub mod attack;
pub mod augment;
pub mod baseline;
pub mod injector;
pub mod check;
pub mod checkpoint;
pub mod color;
pub mod config;
pub mod convergence;
pub mod data;
pub mod defense;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod models;
pub mod ot;
pub mod rng;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
