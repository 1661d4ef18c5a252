//! Bundle container.
//!
//! ```text
//! "SKSQ" | version u32 | total length u64
//! metadata length u64 | metadata (JSON)
//! array count u64 | per array: name length u32, name, ndim u32, dims u64…, f64 data
//! SHA-256 of everything above
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arch::{Architecture, Mode};
use super::bundle::{ModelBundle, TrainableFlags};
use crate::data::{LabelScheme, MinMaxStats, ZNorm};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"SKSQ";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Metadata {
    architecture: Architecture,
    mode: Option<Mode>,
    scheme: Option<LabelScheme>,
    trainable: TrainableFlags,
    minmax: Option<MinMaxStats>,
    scores: Option<ZNorm>,
}

pub fn bundle_to_bytes(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Metadata {
        architecture: bundle.arch.clone(),
        mode: bundle.mode,
        scheme: bundle.scheme,
        trainable: bundle.trainable,
        minmax: bundle.minmax.clone(),
        scores: bundle.scores,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(bundle.params.len() as u64).to_le_bytes());
    for (name, t) in bundle.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let total = (out.len() + DIGEST_LEN) as u64;
    out[8..16].copy_from_slice(&total.to_le_bytes());
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::BundleFormat(format!("field at byte {} runs past the payload", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::BundleFormat("length overflows".into()))
    }
}

/// Verifies header, length and checksum before decoding anything.
pub fn bundle_from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::BundleTruncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BundleFormat("not a bundle file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::BundleVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let total = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if total != bytes.len() as u64 {
        return Err(Error::BundleTruncated {
            expected: total,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(Error::BundleTruncated {
            expected: (HEADER_LEN + DIGEST_LEN) as u64,
            found: bytes.len() as u64,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::BundleChecksum);
    }

    let mut c = Cursor {
        buf: body,
        pos: HEADER_LEN,
    };
    let meta_len = c.len()?;
    let meta: Metadata = serde_json::from_slice(c.take(meta_len)?)?;
    let n = c.len()?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::BundleFormat("array name is not UTF-8".into()))?
            .to_string();
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = c.take(count.checked_mul(8).ok_or_else(|| Error::BundleFormat("array too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if c.pos != body.len() {
        return Err(Error::BundleFormat(format!(
            "{} unexpected bytes after the arrays",
            body.len() - c.pos
        )));
    }
    let bundle = ModelBundle {
        arch: meta.architecture,
        mode: meta.mode,
        scheme: meta.scheme,
        params,
        trainable: meta.trainable,
        minmax: meta.minmax,
        scores: meta.scores,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    fs::write(path, bundle_to_bytes(bundle)?).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    bundle_from_bytes(&bytes)
}
