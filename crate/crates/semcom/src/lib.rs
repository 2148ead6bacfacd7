//! Digital semantic communication laboratory.
//!
//! Trains a small joint source-channel autoencoder, discretizes its latent
//! onto finite constellations through deterministic or probabilistic
//! modulators, simulates AWGN/BSC/BEC channels, and reproduces the
//! analog-pretrain / digital-finetune case study with an evaluation
//! harness (SNR sweeps, ordering checks, multiround accumulation).

pub mod channel;
pub mod checkpoint;
pub mod constellation;
pub mod dataset;
pub mod error;
pub mod latent;
pub mod modulators;
pub mod nn;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
