//! Versioned binary model checkpoints.
//!
//! Layout: the 8-byte magic `CTSCKPT\0`, a little-endian `u32` version, a
//! `u64` header length, the JSON header, then every parameter value (and the
//! embedding table, when present) as little-endian `f64` in header order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Hdnn, HdnnConfig, Karnn, KarnnConfig, Model};
use crate::autodiff::Shape;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CTSCKPT\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Hash of the keyword set the model was trained with.
    pub keyword_hash: String,
    /// Fine-tuned embeddings; `None` when the input table was kept frozen.
    pub embeddings: Option<EmbeddingTable>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
enum Config {
    Karnn(KarnnConfig),
    Hdnn(HdnnConfig),
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    config: Config,
    keyword_hash: String,
    tensors: Vec<(String, Shape)>,
    embeddings: Option<(usize, usize)>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// SHA-256 over the sorted keyword tokens, newline separated.
pub fn keyword_hash(keywords: &BTreeSet<String>) -> String {
    let mut h = Sha256::new();
    for k in keywords {
        h.update(k.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

impl Model {
    /// Fresh model with the architecture described by a checkpoint header.
    fn from_config(config: Config) -> Result<Self> {
        Ok(match config {
            Config::Karnn(c) => Model::Karnn(Karnn::new(c)?),
            Config::Hdnn(c) => Model::Hdnn(Hdnn::new(c)?),
        })
    }

    fn config(&self) -> Config {
        match self {
            Model::Karnn(m) => Config::Karnn(m.config.clone()),
            Model::Hdnn(m) => Config::Hdnn(m.config.clone()),
        }
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let params = ckpt.model.params();
    let header = Header {
        config: ckpt.model.config(),
        keyword_hash: ckpt.keyword_hash.clone(),
        tensors: params.iter().map(|(_, t)| (t.name.clone(), t.shape)).collect(),
        embeddings: ckpt.embeddings.as_ref().map(|e| (e.len(), e.dim())),
        metadata: ckpt.metadata.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in params.iter() {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    if let Some(e) = &ckpt.embeddings {
        for v in e.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|_| bad("truncated parameter data"))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
    if &magic != MAGIC {
        return Err(bad(format!("{} is not a checkpoint", path.display())));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| bad("file too short"))?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("file too short"))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;

    let mut model = Model::from_config(header.config)?;
    let expected: Vec<(String, Shape)> = model.params().iter().map(|(_, t)| (t.name.clone(), t.shape)).collect();
    if expected != header.tensors {
        return Err(bad("tensor list does not match the recorded architecture"));
    }
    for t in model.params_mut().iter_mut() {
        t.data = read_f64s(&mut r, t.data.len())?;
    }
    let embeddings = match header.embeddings {
        Some((rows, dim)) => Some(EmbeddingTable::from_rows(dim, read_f64s(&mut r, rows * dim)?)?),
        None => None,
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint {
        model,
        keyword_hash: header.keyword_hash,
        embeddings,
        metadata: header.metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::HdnnVariant;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut cfg = HdnnConfig::new(HdnnVariant::Cnn, 4, 2);
        cfg.conv_channels = 3;
        cfg.seed = 9;
        let ckpt = Checkpoint {
            model: Model::Hdnn(Hdnn::new(cfg).unwrap()),
            keyword_hash: keyword_hash(&["good".to_string()].into()),
            embeddings: Some(EmbeddingTable::from_rows(2, vec![0.0, 0.0, 1.5, -2.0]).unwrap()),
            metadata: [("lr".to_string(), "0.001".to_string())].into(),
        };
        write_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), ckpt);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn hash_is_order_free() {
        let a: BTreeSet<String> = ["b".into(), "a".into()].into();
        let b: BTreeSet<String> = ["a".into(), "b".into()].into();
        assert_eq!(keyword_hash(&a), keyword_hash(&b));
        assert_ne!(keyword_hash(&a), keyword_hash(&BTreeSet::new()));
    }
}
