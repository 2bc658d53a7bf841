//! Checkpoint directory: `manifest.json` describing every tensor, one
//! little-endian blob `tensors.bin`, and the `vocab.json` the model was
//! trained with.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GistError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::Vocab;

pub const CHECKPOINT_SCHEMA: &str = "gist-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

/// Provenance carried alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed_lineage: Vec<String>,
    pub config_hash: Option<String>,
    pub stage: Option<String>,
    pub global_step: u64,
    pub tokens_seen: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    schema: String,
    config: ModelConfig,
    dtype: String,
    tensors: Vec<TensorEntry>,
    vocab_hash: String,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub vocab: Vocab,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GistError::io(dir, e))?;
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in self.params.tensors() {
            let offset = blob.len();
            for &x in &t.data {
                x.write_le(&mut blob);
            }
            entries.push(TensorEntry {
                name,
                shape: t.shape.clone(),
                offset,
                bytes: blob.len() - offset,
            });
        }
        let manifest = Manifest {
            schema: CHECKPOINT_SCHEMA.into(),
            config: self.params.config.clone(),
            dtype: f32::DTYPE.into(),
            tensors: entries,
            vocab_hash: self.vocab.hash(),
            meta: self.meta.clone(),
        };
        write(dir, MANIFEST_FILE, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        write(dir, BLOB_FILE, &blob)?;
        write(dir, VOCAB_FILE, self.vocab.to_json().as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(GistError::Missing(manifest_path));
        }
        let manifest: Manifest = serde_json::from_slice(&read(&manifest_path)?)?;
        if manifest.schema != CHECKPOINT_SCHEMA {
            return Err(GistError::format("checkpoint", format!("unknown schema {}", manifest.schema)));
        }
        if manifest.dtype != f32::DTYPE {
            return Err(GistError::format("checkpoint", format!("unsupported dtype {}", manifest.dtype)));
        }
        manifest.config.validate()?;
        let vocab = Vocab::from_json(
            std::str::from_utf8(&read(&dir.join(VOCAB_FILE))?)
                .map_err(|e| GistError::format("vocab", e.to_string()))?,
        )?;
        if vocab.hash() != manifest.vocab_hash {
            return Err(GistError::VocabHashMismatch {
                expected: manifest.vocab_hash,
                found: vocab.hash(),
            });
        }
        if vocab.len() != manifest.config.vocab_size || vocab.n_gist() != manifest.config.n_g {
            return Err(GistError::format("checkpoint", "vocab does not match model config"));
        }
        let blob = read(&dir.join(BLOB_FILE))?;
        let mut params = ModelParams::<f32>::init(&manifest.config, 0, 0.0);
        let slots = params.tensors_mut();
        if slots.len() != manifest.tensors.len() {
            return Err(GistError::format("checkpoint", "tensor count mismatch"));
        }
        for ((name, slot), entry) in slots.into_iter().zip(&manifest.tensors) {
            if name != entry.name || slot.shape != entry.shape {
                return Err(GistError::format(
                    "checkpoint",
                    format!("tensor {} does not match expected {name}", entry.name),
                ));
            }
            let bytes = blob
                .get(entry.offset..entry.offset + entry.bytes)
                .filter(|b| b.len() == slot.data.len() * f32::BYTES)
                .ok_or_else(|| GistError::format("checkpoint", format!("bad extent for {name}")))?;
            *slot = Tensor::from_vec(
                &entry.shape,
                bytes.chunks_exact(f32::BYTES).map(f32::read_le).collect(),
            );
        }
        Ok(Checkpoint {
            params,
            vocab,
            meta: manifest.meta,
        })
    }
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| GistError::io(&path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| GistError::io(path, e))
}
