//! Annotated shard files.
//!
//! One JSON header line, then a flat little-endian stream of 9-byte triples
//! `(id: u32, role: u8, sent_idx: u32)`. Role 0 is a regular token, role `k`
//! is the `k`-th gist of a run. `doc_offsets[i]..doc_offsets[i+1]` are the
//! triples of document `i`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{GistError, Result};
use crate::segment::{segment, AnnotatedSequence, Role};
use crate::vocab::Vocab;

pub const SHARD_SCHEMA: &str = "gist-shard/1";
const TRIPLE_BYTES: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub schema: String,
    pub n_g: usize,
    /// Hash of the gist-extended vocabulary used for segmentation.
    pub vocab_hash: String,
    pub doc_offsets: Vec<u64>,
    pub sources: Vec<String>,
    /// Hash of the preprocessing settings, when recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub header: ShardHeader,
    pub documents: Vec<AnnotatedSequence>,
}

impl Shard {
    /// Segments every document with `vocab` (which must carry `n_g` gists).
    pub fn from_corpus(corpus: &Corpus, vocab: &Vocab, n_g: usize) -> Result<Shard> {
        let documents = corpus
            .documents
            .iter()
            .map(|d| segment(d, vocab, n_g))
            .collect::<Result<Vec<_>>>()?;
        let mut doc_offsets = vec![0u64];
        for d in &documents {
            doc_offsets.push(doc_offsets.last().unwrap() + d.len() as u64);
        }
        let sources = corpus
            .sources
            .iter()
            .map(|p| p.file_name().map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into_owned()))
            .collect();
        Ok(Shard {
            header: ShardHeader {
                schema: SHARD_SCHEMA.into(),
                n_g,
                vocab_hash: vocab.hash(),
                doc_offsets,
                sources,
                config_hash: None,
            },
            documents,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for d in &self.documents {
            for ((&id, role), &s) in d.ids().iter().zip(d.roles()).zip(d.sent_idx()) {
                out.extend_from_slice(&id.to_le_bytes());
                out.push(role.to_byte());
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Shard> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| GistError::format("shard", "missing header line"))?;
        let header: ShardHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.schema != SHARD_SCHEMA {
            return Err(GistError::format("shard", format!("unknown schema {}", header.schema)));
        }
        let body = &bytes[nl + 1..];
        if body.len() % TRIPLE_BYTES != 0 {
            return Err(GistError::format("shard", "body is not a whole number of triples"));
        }
        let n = (body.len() / TRIPLE_BYTES) as u64;
        let offsets = &header.doc_offsets;
        if offsets.first() != Some(&0)
            || offsets.last() != Some(&n)
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(GistError::format("shard", "doc_offsets do not cover the body"));
        }
        let mut documents = Vec::with_capacity(offsets.len() - 1);
        for w in offsets.windows(2) {
            let chunk = &body[w[0] as usize * TRIPLE_BYTES..w[1] as usize * TRIPLE_BYTES];
            let mut ids = Vec::new();
            let mut roles = Vec::new();
            let mut sent = Vec::new();
            for t in chunk.chunks_exact(TRIPLE_BYTES) {
                ids.push(u32::from_le_bytes(t[0..4].try_into().unwrap()));
                roles.push(Role::from_byte(t[4]));
                sent.push(u32::from_le_bytes(t[5..9].try_into().unwrap()));
            }
            documents.push(AnnotatedSequence::from_parts(ids, roles, sent, header.n_g)?);
        }
        Ok(Shard { header, documents })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| GistError::io(path, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| GistError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Shard> {
        if !path.exists() {
            return Err(GistError::Missing(path.to_path_buf()));
        }
        Shard::from_bytes(&fs::read(path).map_err(|e| GistError::io(path, e))?)
    }

    /// Fails unless the shard was produced with `vocab`.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if self.header.vocab_hash != vocab.hash() {
            return Err(GistError::VocabHashMismatch {
                expected: vocab.hash(),
                found: self.header.vocab_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn total_positions(&self) -> usize {
        self.documents.iter().map(AnnotatedSequence::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocab, Scheme};
    use std::path::PathBuf;

    #[test]
    fn bytes_roundtrip() {
        let texts = vec![
            (PathBuf::from("a.txt"), "one two. three!".to_string()),
            (PathBuf::from("b.txt"), String::new()),
            (PathBuf::from("c.txt"), "four five".to_string()),
        ];
        let base = build_vocab(&["one two. three! four five"], Scheme::WhitespaceWord).unwrap();
        let v = base.with_gists(3);
        let corpus = Corpus::from_texts(&texts, &v);
        let shard = Shard::from_corpus(&corpus, &v, 3).unwrap();
        assert_eq!(shard.header.doc_offsets, vec![0, 11, 11, 13]);
        let back = Shard::from_bytes(&shard.to_bytes().unwrap()).unwrap();
        assert_eq!(back, shard);
        back.check_vocab(&v).unwrap();
        assert!(back.check_vocab(&base.with_gists(2)).is_err());
    }

    #[test]
    fn corrupt_body_rejected() {
        let v = build_vocab(&["a b."], Scheme::WhitespaceWord).unwrap().with_gists(1);
        let corpus = Corpus::from_texts(&[(PathBuf::from("x.txt"), "a b.".into())], &v);
        let mut bytes = Shard::from_corpus(&corpus, &v, 1).unwrap().to_bytes().unwrap();
        bytes.pop();
        assert!(Shard::from_bytes(&bytes).is_err());
        // Swap the gist role onto a regular slot.
        let mut bytes = Shard::from_corpus(&corpus, &v, 1).unwrap().to_bytes().unwrap();
        let start = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        bytes[start + 4] = 1;
        assert!(Shard::from_bytes(&bytes).is_err());
    }
}
