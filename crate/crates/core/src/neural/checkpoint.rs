//! Model checkpoint file.
//!
//! ```text
//! "PAMM"                  4 bytes
//! version                 u8 (= 1)
//! architecture            u32 LE length + UTF-8
//! representation          u32 LE length + UTF-8
//! config hash             u32 LE length + UTF-8
//! parameter count         u32 LE
//! per parameter           name (u32 LE length + UTF-8), u32 LE rank, rank x u32 LE dims
//! blobs                   every parameter in header order as f32 LE
//! ```
//!
//! Momentum buffers are not stored; a loaded model starts with zeroed ones.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::model::{Architecture, ModelParams};
use super::tensor::Tensor;
use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"PAMM";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams<f32>,
    pub config_hash: String,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    in_header: bool,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let needed = self.pos + n;
        if needed > self.bytes.len() {
            let available = self.bytes.len();
            return Err(if self.in_header {
                FormatError::TruncatedHeader { needed, available }
            } else {
                FormatError::TruncatedPayload { needed, available }
            });
        }
        let s = &self.bytes[self.pos..needed];
        self.pos = needed;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, field: &'static str) -> std::result::Result<String, FormatError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|e| FormatError::InvalidField {
            field,
            reason: e.to_string(),
        })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        put_str(&mut out, &self.model.arch.to_string());
        put_str(&mut out, &self.model.representation);
        put_str(&mut out, &self.config_hash);
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for (name, t) in &self.model.params {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for t in self.model.params.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor {
            bytes,
            pos: 0,
            in_header: true,
        };
        if c.take(4)? != MAGIC {
            return Err(FormatError::BadMagic { expected: "PAMM" }.into());
        }
        let version = c.take(1)?[0];
        if version != VERSION {
            return Err(FormatError::Version {
                found: version,
                expected: VERSION,
            }
            .into());
        }
        let arch_text = c.string("architecture")?;
        let arch: Architecture = arch_text.parse().map_err(|e: Error| FormatError::InvalidField {
            field: "architecture",
            reason: e.to_string(),
        })?;
        let representation = c.string("representation")?;
        let config_hash = c.string("config_hash")?;
        let count = c.u32()? as usize;
        let mut shapes = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = c.string("parameter name")?;
            let rank = c.u32()? as usize;
            if rank > 8 {
                return Err(FormatError::InvalidField {
                    field: "rank",
                    reason: format!("{name} has rank {rank}"),
                }
                .into());
            }
            let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            shapes.push((name, dims));
        }
        c.in_header = false;
        let mut params = BTreeMap::new();
        let mut velocity = BTreeMap::new();
        for (name, shape) in shapes {
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| FormatError::InvalidField {
                    field: "dims",
                    reason: format!("{name} is too large"),
                })?;
            let raw = c.take(n.checked_mul(4).ok_or_else(|| FormatError::InvalidField {
                field: "dims",
                reason: format!("{name} is too large"),
            })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            velocity.insert(name.clone(), vec![0.0; n]);
            params.insert(name, Tensor::new(shape, data)?);
        }
        if c.pos != bytes.len() {
            return Err(FormatError::TrailingBytes {
                extra: bytes.len() - c.pos,
            }
            .into());
        }
        let model = ModelParams {
            arch,
            params,
            velocity,
            representation,
        };
        model.validate().map_err(|e| FormatError::InvalidField {
            field: "parameters",
            reason: e.to_string(),
        })?;
        Ok(Self { model, config_hash })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
