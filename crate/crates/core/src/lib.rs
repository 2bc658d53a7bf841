//! Sentence-boundary gist-token context compression for decoder-only
//! transformers.
//!
//! Text is tokenized ([`vocab`]), gist tokens are inserted after every
//! sentence-ending punctuation mark ([`segment`]), and the model attends
//! through the sentence mask ([`mask`]): each token sees its own sentence
//! plus the gist tokens of earlier sentences. Because closed sentences are
//! only reachable through their gists, the KV cache can drop their regular
//! entries during inference ([`kv_cache`]).

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod kv_cache;
pub mod mask;
pub mod model;
pub mod segment;
pub mod shard;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{GistError, Result};

/// Hex SHA-256 of `bytes`; the form used for every content hash.
pub fn hash_bytes(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
