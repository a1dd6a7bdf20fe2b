//! Marginal-likelihood PAC-Bayes bounds for wide neural networks.
//!
//! The pipeline: load image data, binarize and optionally corrupt the
//! labels, build the NNGP kernel for a fully-connected ReLU network,
//! estimate the log marginal likelihood with expectation propagation,
//! and invert that into a generalization bound. A small exact-Bayes
//! model checks the bound's guarantees directly, and learning-curve
//! fits extract power-law exponents.

pub mod bound;
pub mod curves;
pub mod data;
pub mod ep;
pub mod experiment;
pub mod kernel;
pub mod linalg;
pub mod math;
pub mod oracle;
pub mod trainer;
