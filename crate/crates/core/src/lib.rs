//! Container/material classification from UHF RFID tag reads.
//!
//! The crate covers the whole path from reads to decisions: a synthetic
//! channel that stands in for a reader, log ingestion and windowing,
//! window statistics, a small feedforward classifier trained with Adam,
//! dataset balancing and splitting, evaluation, end-to-end experiment runs,
//! and a streaming choke-point monitor that raises theft-risk alerts.

pub mod alert;
pub mod channel_sim;
pub mod data_prep;
pub mod domain;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod features;
pub mod ingest;
pub mod mlp;

pub use domain::{FeatureMode, FeatureVector, LabeledSample, MaterialClass, ReadWindow, TagRead};
pub use error::{Error, Result};
