//! Synthetic corpus whose sentences depend on the previous sentence.
//!
//! Each sentence has a fixed number of word slots followed by a terminator.
//! Slot `j` repeats slot `j` of the previous sentence with probability
//! `copy_prob`, otherwise it is drawn uniformly. Predicting a sentence well
//! therefore requires remembering the one before it, which under sentence
//! attention is only possible through its gist tokens.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GistError, Result};

const WORDS: [&str; 48] = [
    "ant", "bay", "cat", "dew", "elk", "fig", "gnu", "hen", "ivy", "jay", "kit", "log", "moss",
    "nut", "oak", "pea", "quail", "ram", "sap", "tern", "urn", "vole", "wren", "yak", "zinc",
    "arch", "bark", "cove", "dune", "fern", "gale", "hill", "isle", "jade", "kelp", "lark",
    "mist", "nest", "opal", "pine", "reed", "sand", "tide", "vale", "wave", "yarn", "zest", "brook",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub sentences_per_doc: usize,
    pub slots: usize,
    pub n_words: usize,
    pub copy_prob: f64,
    /// Probability that a terminator is "!" or "?" instead of ".".
    pub alt_terminator_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 64,
            sentences_per_doc: 8,
            slots: 6,
            n_words: 24,
            copy_prob: 0.85,
            alt_terminator_prob: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn tokens_per_doc(&self) -> usize {
        self.sentences_per_doc * (self.slots + 1)
    }
}

pub fn generate(cfg: &SynthConfig) -> Vec<String> {
    let n_words = cfg.n_words.clamp(2, WORDS.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_docs)
        .map(|_| {
            let mut prev: Vec<usize> = Vec::new();
            let mut sentences = Vec::with_capacity(cfg.sentences_per_doc);
            for _ in 0..cfg.sentences_per_doc {
                let slots: Vec<usize> = (0..cfg.slots)
                    .map(|j| match prev.get(j) {
                        Some(&w) if rng.random_bool(cfg.copy_prob) => w,
                        _ => rng.random_range(0..n_words),
                    })
                    .collect();
                let terminator = if rng.random_bool(cfg.alt_terminator_prob) {
                    if rng.random_bool(0.5) {
                        "!"
                    } else {
                        "?"
                    }
                } else {
                    "."
                };
                let words: Vec<&str> = slots.iter().map(|&w| WORDS[w]).collect();
                sentences.push(format!("{}{terminator}", words.join(" ")));
                prev = slots;
            }
            sentences.join(" ")
        })
        .collect()
}

/// Writes documents as `doc_00000.txt`, `doc_00001.txt`, ...
pub fn write_dir(dir: &Path, docs: &[String]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GistError::io(dir, e))?;
    for (i, doc) in docs.iter().enumerate() {
        let path = dir.join(format!("doc_{i:05}.txt"));
        fs::write(&path, doc).map_err(|e| GistError::io(&path, e))?;
    }
    Ok(())
}
