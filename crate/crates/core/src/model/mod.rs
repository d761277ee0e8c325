//! Frozen backbones: ECG encoder, tokenizer and prefix language model.

pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod tokenizer;

pub use decoder::{DecoderConfig, LmPretrainConfig, LmPretrainReport};
pub use encoder::{EncoderConfig, EncoderPretrainConfig, ProbeReport};
pub use tokenizer::Tokenizer;
