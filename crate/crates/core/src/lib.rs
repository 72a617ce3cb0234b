//! Multi-modal 3D tumor segmentation that stays usable when imaging
//! modalities are missing.
//!
//! The crate provides four network strategies (a plain UNet, the same UNet
//! trained with modality dropout, a multipath network fused by
//! concatenation, and a multipath network fused by a mean/variance shared
//! representation), the pathway pretraining procedure, a whole-volume
//! evaluation harness over every modality subset, and t-SNE inspection of
//! the final hidden layer.

pub mod cli;
pub mod data;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod missingness;
pub mod nets;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
