//! Binary model checkpoints.
//!
//! Layout (little endian): magic `RNF1`, `u32` format version, `u32` number of
//! linear layers `L`, `L + 1` `u32` layer widths, `u32` encoder depth, `f32`
//! dropout rate, then for every layer its row-major `f32` weights followed by
//! its `f32` biases, and finally a 32-byte digest of the run configuration.
//! Parameters are stored in single precision, so a loaded model equals the
//! saved one up to `f32` rounding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Dense, Model};

pub const MAGIC: &[u8; 4] = b"RNF1";
pub const VERSION: u32 = 1;
pub const DIGEST_LEN: usize = 32;

pub type Digest = [u8; DIGEST_LEN];

pub fn to_bytes(model: &Model, digest: &Digest) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.num_layers() as u32).to_le_bytes());
    for &d in model.layer_dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.encoder_depth() as u32).to_le_bytes());
    out.extend_from_slice(&(model.dropout_rate() as f32).to_le_bytes());
    for layer in model.layers() {
        for &w in layer.weights.iter().chain(&layer.biases) {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Digest)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let n_layers = r.u32("layer count")? as usize;
    if n_layers == 0 || n_layers > 1024 {
        return Err(Error::CorruptCheckpoint(format!("implausible layer count {n_layers}")));
    }
    let dims = (0..=n_layers)
        .map(|_| r.u32("layer width").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let encoder_depth = r.u32("encoder depth")? as usize;
    let dropout = r.f32("dropout")? as f64;

    let n_params: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let expected = r.pos + 4 * n_params + DIGEST_LEN;
    if bytes.len() != expected {
        return Err(Error::CorruptCheckpoint(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for w in dims.windows(2) {
        let mut layer = Dense::zeros(w[0], w[1]);
        for v in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
            *v = r.f32("parameters")? as f64;
        }
        layers.push(layer);
    }
    let digest: Digest = r.take(DIGEST_LEN, "digest")?.try_into().unwrap();
    let model = Model::from_layers(layers, encoder_depth, dropout)
        .map_err(|e| Error::CorruptCheckpoint(format!("invalid model: {e}")))?;
    Ok((model, digest))
}

pub fn save(model: &Model, digest: &Digest, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, digest)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, Digest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
