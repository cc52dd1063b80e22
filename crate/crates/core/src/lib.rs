//! Multimodal emotion recognition in conversations with visual emotion
//! anchors.
//!
//! The crate covers the full pipeline: conversation data and binary file
//! formats, the modality context encoder, the supervision and anchoring
//! heads, the combined training objective, AdamW training with early
//! stopping, and evaluation metrics.

pub mod anchor;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use modality::{Modality, PerModality};
