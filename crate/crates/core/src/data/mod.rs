//! Synthetic data, file formats, and the dataset manifest.

pub mod format;
pub mod manifest;
pub mod synth;
