//! Single-file binary checkpoints.
//!
//! Layout: `MAMOECKP` magic, `u32` version, `u64` payload length, payload,
//! then a SHA-256 digest of everything before it. All integers and floats are
//! little-endian; floats are stored as raw IEEE-754 bits.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: &[u8; 8] = b"MAMOECKP";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stage: u8,
    pub step: u64,
    pub tensors: Vec<TensorRecord>,
    pub adam_t: u64,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub rng: RngState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn malformed(msg: impl Into<String>) -> Error {
    CheckpointError::Malformed(msg.into()).into()
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| malformed("payload ends early"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| malformed(format!("length {n} too large")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| malformed("float array too large"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut p = Writer(Vec::new());
        p.bytes(serde_json::to_string(&self.config.to_json())?.as_bytes());
        p.u8(self.stage);
        p.u64(self.step);
        p.u64(self.tensors.len() as u64);
        for t in &self.tensors {
            p.bytes(t.name.as_bytes());
            p.u32(t.shape.len() as u32);
            for &d in &t.shape {
                p.u64(d as u64);
            }
            p.floats(&t.data);
        }
        p.u64(self.adam_t);
        p.u64(self.adam_m.len() as u64);
        for (m, v) in self.adam_m.iter().zip(&self.adam_v) {
            p.floats(m);
            p.floats(v);
        }
        p.0.extend_from_slice(&self.rng.seed);
        p.u64(self.rng.stream);
        p.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());

        let mut out = Writer(Vec::with_capacity(p.0.len() + HEADER_LEN + DIGEST_LEN));
        out.0.extend_from_slice(MAGIC);
        out.u32(VERSION);
        out.bytes(&p.0);
        let digest = Sha256::digest(&out.0);
        out.0.extend_from_slice(&digest);
        Ok(out.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let head = &buf[..buf.len().min(MAGIC.len())];
        if head != &MAGIC[..head.len()] {
            return Err(CheckpointError::BadMagic.into());
        }
        if buf.len() < HEADER_LEN + DIGEST_LEN {
            return Err(CheckpointError::Checksum.into());
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            }
            .into());
        }
        let payload_len = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes"));
        let expected_len = (HEADER_LEN + DIGEST_LEN) as u64 + payload_len;
        if buf.len() as u64 != expected_len {
            return Err(CheckpointError::Checksum.into());
        }
        let (body, digest) = buf.split_at(buf.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum.into());
        }

        let mut r = Reader {
            buf: &body[HEADER_LEN..],
            pos: 0,
        };
        let config_text = std::str::from_utf8(r.bytes()?).map_err(|e| malformed(e.to_string()))?;
        let config = ModelConfig::from_json_str(config_text)?;
        let stage = r.u8()?;
        let step = r.u64()?;
        let n = r.len()?;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|e| malformed(e.to_string()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let data = r.floats()?;
            if shape.iter().product::<usize>() != data.len() {
                return Err(malformed(format!("tensor {name}: shape {shape:?} vs {} values", data.len())));
            }
            tensors.push(TensorRecord { name, shape, data });
        }
        let adam_t = r.u64()?;
        let nm = r.len()?;
        let mut adam_m = Vec::with_capacity(nm.min(1 << 16));
        let mut adam_v = Vec::with_capacity(nm.min(1 << 16));
        for _ in 0..nm {
            adam_m.push(r.floats()?);
            adam_v.push(r.floats()?);
        }
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != r.buf.len() {
            return Err(malformed(format!("{} trailing payload bytes", r.buf.len() - r.pos)));
        }
        Ok(Self {
            config,
            stage,
            step,
            tensors,
            adam_t,
            adam_m,
            adam_v,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
        })
    }

    /// Writes through a temporary sibling and renames, so a failed write
    /// never leaves a partial file at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
