//! On-disk model format: `index.json` lists the configuration and every
//! parameter with its shape and byte offset into `params.bin`, which holds
//! little-endian f64 values, row-major, in index order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "hvector-checkpoint-1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    format: String,
    config: ModelConfig,
    blob: String,
    params: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl Model {
    /// Write the model into directory `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut params = Vec::new();
        for entry in self.store.entries() {
            params.push(IndexEntry {
                name: entry.name.clone(),
                shape: entry.tensor.shape().to_vec(),
                offset: blob.len(),
            });
            for v in entry.tensor.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let index = Index {
            format: FORMAT.into(),
            config: self.config.clone(),
            blob: BLOB_FILE.into(),
            params,
        };
        let json = serde_json::to_string_pretty(&index)?;
        let index_path = dir.join(INDEX_FILE);
        fs::write(&index_path, json + "\n").map_err(|e| Error::io(&index_path, e))?;
        let blob_path = dir.join(BLOB_FILE);
        fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))
    }

    /// Read a model written by [`Model::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: Index =
            serde_json::from_str(&text).map_err(|e| Error::format(&index_path, e.to_string()))?;
        if index.format != FORMAT {
            return Err(Error::format(&index_path, format!("unknown format {:?}", index.format)));
        }
        let mut model = Model::new(index.config, 0).map_err(|e| Error::format(&index_path, e.to_string()))?;

        let blob_path = dir.join(&index.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let entries = model.store.entries();
        if index.params.len() != entries.len() {
            return Err(Error::format(
                &index_path,
                format!("{} parameters listed, model has {}", index.params.len(), entries.len()),
            ));
        }
        let mut expected_offset = 0;
        for (listed, entry) in index.params.iter().zip(entries) {
            if listed.name != entry.name || listed.shape != entry.tensor.shape() || listed.offset != expected_offset {
                return Err(Error::format(
                    &index_path,
                    format!(
                        "parameter {} {:?} at {} does not match {} {:?} at {}",
                        listed.name,
                        listed.shape,
                        listed.offset,
                        entry.name,
                        entry.tensor.shape(),
                        expected_offset
                    ),
                ));
            }
            expected_offset += 8 * entry.tensor.len();
        }
        if blob.len() != expected_offset {
            return Err(Error::format(
                &blob_path,
                format!("expected {expected_offset} bytes, found {}", blob.len()),
            ));
        }
        let ids: Vec<_> = model.store.ids().collect();
        let mut chunks = blob.chunks_exact(8);
        for id in ids {
            for v in model.store.get_mut(id).data_mut() {
                let bytes = chunks.next().expect("length checked");
                *v = f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"));
            }
        }
        Ok(model)
    }

    /// Load a checkpoint and require its configuration to equal `expected`.
    pub fn load_matching(dir: &Path, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load(dir)?;
        if model.config != *expected {
            return Err(Error::Config(format!(
                "checkpoint in {} was trained with a different model configuration",
                dir.display()
            )));
        }
        Ok(model)
    }
}
