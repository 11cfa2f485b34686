//! Versioned binary container for model parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"BXPT"                magic
//! u32                    format version
//! u64 + bytes            JSON manifest (format version, model config, seed, step)
//! u64                    tensor count
//! per tensor, sorted by name:
//!   u64 + bytes          UTF-8 name
//!   u64                  rank
//!   u64 * rank           dims
//!   f64 * prod(dims)     row-major values
//! ```

use std::path::Path;

use boxprompt_autograd::{Params, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::pipeline::Model;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BXPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub manifest: Manifest,
    /// SHA-256 of the encoded bytes.
    pub fingerprint: String,
}

pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode(model: &Model, seed: u64, step: u64) -> Vec<u8> {
    let manifest = Manifest {
        version: VERSION,
        config: model.config().clone(),
        seed,
        step,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let params = model.params();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u64).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
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
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated data".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|n| *n <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {v}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.len()?;
    let manifest: Manifest = serde_json::from_slice(r.take(n)?)?;
    let count = r.len()?;
    let mut params = Params::new();
    for _ in 0..count {
        let n = r.len()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.len()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(&shape, data));
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let model = Model::from_params(manifest.config.clone(), params)?;
    Ok(Checkpoint {
        model,
        manifest,
        fingerprint: fingerprint(bytes),
    })
}

/// Writes the checkpoint and returns its fingerprint.
pub fn save(path: &Path, model: &Model, seed: u64, step: u64) -> Result<String> {
    let bytes = encode(model, seed, step);
    std::fs::write(path, &bytes)?;
    Ok(fingerprint(&bytes))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        let cfg = ModelConfig {
            backbone_channels: vec![2, 2],
            roi_stages: vec![0],
            use_lpm: false,
            use_gpm: false,
            head_hidden: 4,
            fuse_channels: 2,
            mask_side: 4,
            ..ModelConfig::default()
        };
        Model::init(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = tiny();
        let bytes = encode(&m, 3, 17);
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.model.params(), m.params());
        assert_eq!(ck.manifest.step, 17);
        assert_eq!(ck.manifest.version, VERSION);
        assert_eq!(ck.fingerprint, fingerprint(&bytes));
        assert_eq!(encode(&ck.model, 3, 17), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode(&tiny(), 0, 0);
        assert!(decode(b"nope").is_err());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(matches!(decode(&wrong), Err(Error::Checkpoint(_))));
    }
}
