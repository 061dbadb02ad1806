//! Instrumented GPT-2 inference and analysis of how factual recall competes
//! with in-context counterfactual information.
//!
//! The crate is organised bottom-up: [`tensor`] kernels, a byte-level BPE
//! [`tokenizer`], the [`model`] runtime with activation capture and attention
//! edits, the prompt [`corpus`], logit inspection in [`tracer`], and
//! attention edits in [`intervention`].

pub mod corpus;
pub mod intervention;
pub mod model;
pub mod stats;
pub mod tensor;
pub mod tokenizer;
pub mod tracer;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Tokenizer(#[from] tokenizer::TokenizerError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Trace(#[from] tracer::TraceError),
    #[error(transparent)]
    Intervention(#[from] intervention::InterventionError),
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file, streamed.
pub fn sha256_file(path: impl AsRef<std::path::Path>) -> std::io::Result<String> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}
