use serde::{Deserialize, Serialize};

use crate::error::{GistError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEncoding {
    Rotary,
    Learned,
}

fn default_true() -> bool {
    true
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Total vocabulary, gist ids included.
    pub vocab_size: usize,
    pub n_g: usize,
    pub max_seq_len: usize,
    pub pos_encoding: PosEncoding,
    #[serde(default = "default_true")]
    pub tied_lm_head: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Embedding rows holding the gist tokens.
    pub fn gist_rows(&self) -> std::ops::Range<usize> {
        self.vocab_size - self.n_g..self.vocab_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GistError::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.pos_encoding == PosEncoding::Rotary && self.head_dim() % 2 != 0 {
            return bad(format!("rotary needs an even head dim, got {}", self.head_dim()));
        }
        if self.vocab_size < self.n_g + 2 {
            return bad(format!(
                "vocab_size {} too small for {} gist ids",
                self.vocab_size, self.n_g
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return bad("n_layers, d_ff and max_seq_len must be positive".into());
        }
        Ok(())
    }
}
