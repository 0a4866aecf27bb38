//! Reproducible benchmark harness for multi-structure echocardiography
//! segmentation.
//!
//! The crate covers the whole experimental pipeline: data-representation
//! routes ([`preprocessing`], [`manifest`]), curation of automatic-mask
//! pseudo-labels ([`pseudo_label`]), the three segmentation architectures
//! ([`models`]), losses and contrastive pretraining ([`losses`],
//! [`contrastive`]), evaluation ([`metrics`]) and orchestration
//! ([`training`]).
//!
//! Class indices are fixed globally: 0 background, 1 LV endocardium,
//! 2 LV myocardium, 3 left atrium.

pub mod contrastive;
pub mod error;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod preprocessing;
pub mod pseudo_label;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
