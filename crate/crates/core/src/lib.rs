//! Multimodal (face image + acoustic echo) presentation-attack detection.
//!
//! - [`signal`]: the emitted probe, a pilot tone and nine windowed chirps.
//! - [`channel`]: synthetic recordings and face images for labelled datasets.
//! - [`echo`]: recording → face-echo spectrogram.
//! - [`model`]: two-branch network with hierarchical cross-attention fusion.
//! - [`metrics`]: ROC, AUC, ACC, HTER, EER.
//! - [`harness`]: configuration, checkpoints, training, evaluation, inference.

pub mod channel;
pub mod dsp;
pub mod echo;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod signal;
