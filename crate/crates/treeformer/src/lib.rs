//! A chart encoder that composes token vectors into phrase vectors the way
//! CKY builds parses: every span's representation is an attention-weighted
//! pool over the compositions of all its prefix/suffix splits. The crate
//! bundles the encoder (sequential reference and level-parallel form), a
//! minimal reverse-mode autodiff core it runs on, a token pre-encoder, a toy
//! seq2seq/classification head, synthetic hierarchical datasets, a complexity
//! profiler for the cost formulas, and a CLI tying it together.

pub mod chart;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod model;
pub mod preencoder;
pub mod profiler;
pub mod rng;
pub mod tensor;
pub mod train;

pub use chart::{Span, SpanChart};
pub use encoder::{OpCounters, TreeformerConfig};
pub use error::{Error, Result};
pub use tensor::tape::{Tape, TensorId};
pub use tensor::{Scalar, Tensor};
