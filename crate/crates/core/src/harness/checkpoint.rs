//! Binary checkpoints.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! magic "LSKSACKP" | u32 version | u64 step | f64 best_miou
//! u32 len | config text (utf-8)
//! 3 sections (params, buffers, momentum): u32 count, then per record
//!     u32 len | name | u32 n c h w | f64 data...
//! 32-byte SHA-256 of everything above
//! ```
//!
//! The checksum is verified before anything is parsed, so a damaged file is
//! never partially loaded.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"LSKSACKP";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Canonical run configuration text.
    pub config_text: String,
    /// Optimizer steps taken.
    pub step: u64,
    /// Best held-out mIoU seen so far; negative before the first evaluation.
    pub best_miou: f64,
    pub params: ParamStore,
    pub buffers: ParamStore,
    /// Momentum buffers, one per parameter.
    pub momentum: ParamStore,
}

impl Checkpoint {
    /// Bitwise equality of every stored field.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.config_text == other.config_text
            && self.step == other.step
            && self.best_miou.to_bits() == other.best_miou.to_bits()
            && self.params.bit_eq(&other.params)
            && self.buffers.bit_eq(&other.buffers)
            && self.momentum.bit_eq(&other.momentum)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.best_miou.to_le_bytes());
        put_bytes(&mut out, self.config_text.as_bytes());
        for store in [&self.params, &self.buffers, &self.momentum] {
            out.extend_from_slice(&(store.len() as u32).to_le_bytes());
            for (name, t) in store.iter() {
                put_bytes(&mut out, name.as_bytes());
                for d in t.shape().dims() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + DIGEST_LEN {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let mut inner = || -> Option<Result<Checkpoint>> {
            if r.take(8)? != MAGIC {
                return Some(Err(corrupt("bad magic")));
            }
            let version = r.u32()?;
            if version != VERSION {
                return Some(Err(corrupt(&format!("unsupported version {version}"))));
            }
            let step = r.u64()?;
            let best_miou = f64::from_le_bytes(r.take(8)?.try_into().ok()?);
            let config_text = String::from_utf8(r.bytes()?.to_vec()).ok()?;
            let mut stores = Vec::with_capacity(3);
            for _ in 0..3 {
                let count = r.u32()?;
                let mut store = ParamStore::new();
                for _ in 0..count {
                    let name = std::str::from_utf8(r.bytes()?).ok()?.to_string();
                    let dims: Vec<usize> = (0..4)
                        .map(|_| r.u32().map(|d| d as usize))
                        .collect::<Option<_>>()?;
                    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]).ok()?;
                    let raw = r.take(shape.numel().checked_mul(8)?)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect();
                    store
                        .insert(name, Tensor::from_vec(shape, data).ok()?)
                        .ok()?;
                }
                stores.push(store);
            }
            if r.pos != r.buf.len() {
                return Some(Err(corrupt("trailing bytes after last section")));
            }
            let momentum = stores.pop()?;
            let buffers = stores.pop()?;
            let params = stores.pop()?;
            Some(Ok(Checkpoint {
                config_text,
                step,
                best_miou,
                params,
                buffers,
                momentum,
            }))
        };
        inner().unwrap_or_else(|| Err(corrupt("malformed record")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so readers never observe a half-written file
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn bytes(&mut self) -> Option<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
