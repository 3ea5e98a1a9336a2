use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("autograd error: {0}")]
    Autograd(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("fully masked softmax row at slice {0}")]
    FullyMasked(usize),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by bad user input (configuration, flags, files
    /// with the wrong schema) as opposed to failures during a run.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
