//! Named-tensor checkpoints.
//!
//! The binary file is `ISRC`, a little-endian `u32` version and tensor
//! count, then per tensor: name length and UTF-8 name, rank, extents (all
//! `u32`) and `f64` values. A JSON manifest next to it (same stem, `.json`)
//! records the configuration, vocabulary and shapes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ISRC";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vocabulary,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode_params(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.count() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::parse(
                format!("{}:{}", self.origin, self.at),
                "checkpoint ends early",
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_params(bytes: &[u8], origin: &str) -> Result<ParamStore> {
    let mut r = Reader {
        bytes,
        at: 0,
        origin,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::parse(origin, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::parse(origin, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::parse(origin, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::parse(format!("{origin}: {name}"), e.to_string()))?;
        params.insert(name, t);
    }
    if r.at != bytes.len() {
        return Err(Error::parse(origin, "trailing bytes after last tensor"));
    }
    Ok(params)
}

/// Writes the binary checkpoint and its manifest.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_params(&model.params)).map_err(|e| Error::io(path, e))?;
    let manifest = Manifest {
        format: "ISRC".into(),
        version: VERSION,
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        tensors: model
            .params
            .iter()
            .map(|(k, t)| (k.clone(), t.shape().to_vec()))
            .collect(),
    };
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::parse(mpath.display().to_string(), e.to_string()))?;
    manifest.config.validate()?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode_params(&bytes, &path.display().to_string())?;
    let model = Model {
        config: manifest.config,
        vocab: manifest.vocab,
        params,
    };
    model.check_params()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip_exactly() {
        let mut p = ParamStore::new();
        p.insert("a.b", Tensor::new(vec![2, 2], vec![1.0, -0.5, 1e-300, f64::MAX]).unwrap());
        p.insert("z", Tensor::vector(vec![0.1]));
        let bytes = encode_params(&p);
        assert_eq!(&bytes[..4], b"ISRC");
        assert_eq!(decode_params(&bytes, "mem").unwrap(), p);
        assert!(decode_params(&bytes[..bytes.len() - 1], "mem").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode_params(&bad, "mem").unwrap_err().exit_code(), 3);
    }
}
