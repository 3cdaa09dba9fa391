//! Robust unsupervised domain adaptation.
//!
//! A source encoder and classifier are first trained adversarially on labeled
//! source data with a margin contrastive regularizer on encoder features. A
//! target encoder, initialized from the source encoder, is then adapted on
//! unlabeled target data against a domain discriminator, with a
//! source-anchored contrastive loss on confidently pseudo-labeled clean and
//! adversarial target features and a KL consistency regularizer.

pub mod attacks;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pseudo_label;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
