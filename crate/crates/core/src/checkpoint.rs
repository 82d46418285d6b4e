//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!   magic "CACP" | version u32 | config length u64 + UTF-8 bytes |
//!   tensor count u64 | per tensor: name length u64 + bytes, rank u64,
//!   dims u64 each, dtype tag u8, raw little-endian payload |
//!   CRC-32 (IEEE) of all preceding bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"CACP";
pub const FORMAT_VERSION: u32 = 1;

/// Raw named tensor; payload bytes are kept verbatim so a load/save cycle
/// is bitwise lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB88320 & mask);
        }
    }
    !crc
}

impl Checkpoint {
    pub fn new(config: String) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            config,
            tensors: Vec::new(),
        }
    }

    /// Append every parameter of `model` under its canonical name.
    pub fn add_model<E: Scalar>(&mut self, model: &dyn ParamSet<E>) {
        model.visit(&mut |p| {
            let mut data = Vec::with_capacity(p.value.len() * E::DTYPE.size_bytes());
            for v in &p.value {
                v.write_le(&mut data);
            }
            self.tensors.push(NamedTensor {
                name: p.name.clone(),
                dims: p.shape.clone(),
                dtype: E::DTYPE,
                data,
            });
        });
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Restore every parameter of `model` bitwise from the stored tensors.
    pub fn load_model<E: Scalar>(&self, model: &mut dyn ParamSet<E>) -> Result<()> {
        let mut missing = None;
        model.visit_mut(&mut |p| {
            if missing.is_some() {
                return;
            }
            let Some(t) = self.tensors.iter().find(|t| t.name == p.name) else {
                missing = Some(format!("tensor {} absent from checkpoint", p.name));
                return;
            };
            if t.dims != p.shape {
                missing = Some(format!(
                    "tensor {}: stored dims {:?} != model {:?}",
                    p.name, t.dims, p.shape
                ));
                return;
            }
            if t.dtype != E::DTYPE {
                missing = Some(format!("tensor {}: dtype mismatch", p.name));
                return;
            }
            let step = E::DTYPE.size_bytes();
            p.value = t.data.chunks_exact(step).map(E::read_le).collect();
        });
        match missing {
            Some(m) => Err(Error::Checkpoint(m)),
            None => Ok(()),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let cfg = self.config.as_bytes();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(t.dims.len() as u64).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(t.dtype as u8);
            out.extend_from_slice(&t.data);
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let fail = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 4 + 4 + 8 + 8 + 4 {
            return Err(fail("truncated checkpoint"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "CRC mismatch: stored {stored:#010x}, computed {actual:#010x}"
            )));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(fail("bad magic, not a checkpoint file"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let cfg_len = r.u64()? as usize;
        let config = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| fail("config blob is not UTF-8"))?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u64()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| fail("tensor name is not UTF-8"))?;
            let rank = r.u64()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
            let numel: usize = dims.iter().product();
            let data = r.take(numel * dtype.size_bytes())?.to_vec();
            tensors.push(NamedTensor {
                name,
                dims,
                dtype,
                data,
            });
        }
        if r.pos != body.len() {
            return Err(fail("trailing bytes after tensor table"));
        }
        Ok(Checkpoint {
            version,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
