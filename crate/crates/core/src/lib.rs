//! Attention-based multistation earthquake early warning.
//!
//! The crate covers synthetic data generation, the model (waveform encoder,
//! station blending, prediction heads), three-phase training and streaming
//! alarm evaluation. Tensor math lives in the `numcore` crate.

pub mod blending;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod encoder;
pub mod evaluation;
pub mod heads;
pub mod model;
pub mod training;
