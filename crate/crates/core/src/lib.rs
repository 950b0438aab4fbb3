//! Joint text, audio and vision encoders with attention-pooled cross-modal fusion.

pub mod audio;
pub mod audio_encoder;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod image;
mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use params::{NormId, ParamId, ParamStore};
pub use tensor::Tensor;
