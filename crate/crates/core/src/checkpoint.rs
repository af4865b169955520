//! Checkpoint directories: `params.mdck`, `vocab.txt` and `manifest.json`.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_at, Error, Result};
use crate::lm::Vocabulary;
use crate::model::{init_params, Model, ModelConfig};
use crate::tensor::io::{read_container, write_container};

pub const PARAMS_FILE: &str = "params.mdck";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub model: ModelConfig,
    /// Verbatim run configuration.
    pub config: serde_json::Value,
    pub vocab_size: usize,
    pub steps: usize,
    /// Content hash of `params.mdck`.
    pub params_hash: String,
}

/// Git-style object hash: SHA-256 over `"blob <len>\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn params_bytes(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    write_container(&mut buf, &model.params).expect("in-memory write");
    buf
}

/// Writes the checkpoint into `dir` (created if missing). Returns the
/// parameter hash.
pub fn save(dir: &Path, model: &Model, config: &serde_json::Value, steps: usize) -> Result<String> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let bytes = params_bytes(model);
    let hash = content_hash(&bytes);
    let p = dir.join(PARAMS_FILE);
    fs::write(&p, &bytes).map_err(io_at(&p))?;
    let p = dir.join(VOCAB_FILE);
    fs::write(&p, model.vocab.to_text()).map_err(io_at(&p))?;
    let manifest = Manifest {
        format: 1,
        model: model.cfg.clone(),
        config: config.clone(),
        vocab_size: model.vocab.len(),
        steps,
        params_hash: hash.clone(),
    };
    let p = dir.join(MANIFEST_FILE);
    let f = fs::File::create(&p).map_err(io_at(&p))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &manifest).map_err(|e| Error::Io {
        path: p.clone(),
        source: e.into(),
    })?;
    Ok(hash)
}

pub fn load(dir: &Path) -> Result<(Model, Manifest)> {
    let p = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(io_at(&p))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?;
    manifest.model.validate()?;
    let p = dir.join(VOCAB_FILE);
    let vocab = Vocabulary::from_text(&fs::read_to_string(&p).map_err(io_at(&p))?)?;
    if vocab.len() != manifest.vocab_size {
        return Err(Error::Invalid(format!(
            "vocabulary has {} entries, manifest says {}",
            vocab.len(),
            manifest.vocab_size
        )));
    }
    let p = dir.join(PARAMS_FILE);
    let bytes = fs::read(&p).map_err(io_at(&p))?;
    let hash = content_hash(&bytes);
    if hash != manifest.params_hash {
        return Err(Error::Invalid(format!("{}: content hash mismatch", p.display())));
    }
    let params = read_container(&mut bytes.as_slice()).map_err(io_at(&p))?;
    let expected = init_params(&manifest.model, vocab.len(), 0);
    let layout = |s: &crate::params::ParamStore<f32>| -> Vec<(String, Vec<usize>, bool)> {
        s.iter()
            .map(|(n, p)| (n.to_string(), p.value.shape().to_vec(), p.trainable))
            .collect()
    };
    if layout(&params) != layout(&expected) {
        return Err(Error::Invalid(format!(
            "{}: parameter layout does not match the model configuration",
            p.display()
        )));
    }
    Ok((
        Model {
            cfg: manifest.model.clone(),
            vocab,
            params,
        },
        manifest,
    ))
}
