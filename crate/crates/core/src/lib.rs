//! Multi-channel speech recognition with contrastive pre-training.

pub mod asr;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod pretrain;
pub mod quantizer;
pub mod tensor;
pub mod train;
pub mod transducer;

pub use error::{Error, Result};
