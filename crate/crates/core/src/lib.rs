//! Time-series captioning: synthetic data, phase-tagged text, a 1D-CNN
//! autoencoder, the multi-modal encoder, retrieval-based denoising, the
//! caption decoder and evaluation.

pub mod autoencoder;
pub mod checkpoint;
pub mod datagen;
pub mod decoder;
pub mod denoiser;
pub mod encoder;
pub mod eval;
pub mod llm;
mod error;
pub mod nn;
pub mod pipeline;
pub mod series;
pub mod textrep;

pub use error::{Error, Result};
pub use series::{CaptionedPair, Location, PatternLabel, Source, TimeSeries, Trend};
