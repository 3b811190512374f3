//! Object-guided token sampling and object-aware attention for a small
//! space-time vision transformer, together with a synthetic moving-sprite
//! benchmark, gradient checking, analytic FLOP accounting and sweep tooling.

pub mod annotations;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalbench;
pub mod heatmap;
pub mod model;
pub mod sampler;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tensor_io;
pub mod tokenizer;
pub mod tracker;
pub mod trainer;

pub use error::{Error, Result};
pub use heatmap::{Heatmap, TokenScores};
pub use model::{Model, ModelConfig};
pub use sampler::{SampleResult, SamplerConfig, SamplingMode};
pub use scalar::Scalar;
pub use synth::{Detection, DetectionTrackSet, SynthConfig, VideoTensor};
pub use tensor::Mat;
pub use tokenizer::{TokenGrid, TokenSet, TubeDims};
