//! Steganographic cost learning from generated-image fluctuations.

pub mod adversary;
pub mod dataset;
pub mod embedding;
pub mod evaluation;
pub mod generator;
pub mod grid;
pub mod image;
pub mod stats;
pub mod training;
pub mod volatility;
