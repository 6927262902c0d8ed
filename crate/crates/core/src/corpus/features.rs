//! Binary video feature blocks.
//!
//! Layout (little-endian): magic `ISRV`, `u32 F`, `u32 O`, `u32 D_raw`, then
//! `F*O*D_raw` `f32` values in frame-major order. Values are widened to
//! `f64` on load.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"ISRV";

pub fn encode_features(block: &Tensor) -> Result<Vec<u8>> {
    let [f, o, d] = *block.shape() else {
        return Err(Error::Input(format!(
            "feature block must be F x O x D, got {:?}",
            block.shape()
        )));
    };
    let mut out = Vec::with_capacity(16 + block.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [f, o, d] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in block.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], origin: &str) -> Result<Tensor> {
    let bad = |msg: &str| Error::parse(origin, msg);
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("missing ISRV header"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (f, o, d) = (u32_at(4), u32_at(8), u32_at(12));
    let n = f * o * d;
    if n == 0 {
        return Err(bad("zero extent in header"));
    }
    if bytes.len() != 16 + 4 * n {
        return Err(bad(&format!(
            "header declares {f}x{o}x{d} values but payload holds {} bytes",
            bytes.len() - 16
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![f, o, d], data)
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, &path.display().to_string())
}

pub fn write_features(path: &Path, block: &Tensor) -> Result<()> {
    let bytes = encode_features(block)?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}
