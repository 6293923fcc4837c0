//! Character-level string-to-string transduction with recurrent encoder-decoders.
//!
//! The crate implements four attention variants over a shared bidirectional
//! LSTM encoder and LSTM decoder: soft attention, hard (latent) alignment with
//! exact polynomial-time marginalization, and input-fed versions of both.
//! Hard models can also be trained with a sampled score-function estimator
//! instead of the exact marginal. Training, greedy decoding, evaluation
//! metrics, and alignment analysis (monotonicity classification, heatmap
//! export) are included, along with a small reverse-mode autodiff engine the
//! models are built on.

pub mod align;
pub mod data;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nets;
pub mod rng;
pub mod tensor;
pub mod train;
