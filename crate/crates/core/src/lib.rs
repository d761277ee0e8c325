//! Few-shot ECG question answering: synthetic corpus, frozen backbones,
//! trainable fusion mapper and MAML.

pub mod mapper;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synth;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] ecgqa_autodiff::Error),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("unknown attribute id {0}")]
    UnknownAttribute(usize),
    #[error("unknown paraphrase id {0}")]
    UnknownParaphrase(usize),
    #[error("unknown prompt variant {0:?}")]
    UnknownVariant(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
