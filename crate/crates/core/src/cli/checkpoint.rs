//! Named-tensor checkpoint file.
//!
//! ```text
//! "SRNN" | version u32 | count u32 |
//!   count × ( name_len u16 | name utf-8 | rank u8 | dims u32 × rank | f32 payload ) |
//! crc32 of everything before it
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Parameterized;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"SRNN";
pub const VERSION: u32 = 1;

/// Serializes named tensors. Values are rounded to `f32`.
pub fn encode_checkpoint(tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::contract(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::contract(format!("rank of {name} exceeds 255")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::contract(format!("extent of {name} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format {
                offset: self.pos as u64,
                reason: format!("file ends inside {what}"),
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint. The CRC and header are verified before any tensor
/// is decoded, so a damaged file never yields partial results.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 16 {
        return Err(Error::Format {
            offset: 0,
            reason: format!("{} bytes is shorter than any checkpoint", bytes.len()),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format {
            offset: body.len() as u64,
            reason: format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"),
        });
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, not a checkpoint".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: start as u64,
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format {
            offset: start as u64,
            reason: format!("tensor {name}: {e}"),
        })?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            reason: format!("{} trailing bytes after the last tensor", body.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn checkpoint_save<M: Parameterized + ?Sized>(model: &M, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(&model.named_params())?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Overwrites every parameter of `model` with the tensor of the same name.
/// Nothing is modified unless all names are present with matching shapes.
pub fn assign_tensors<M: Parameterized + ?Sized>(model: &mut M, tensors: &[(String, Tensor)]) -> Result<()> {
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut found = Vec::with_capacity(names.len());
    let mut missing = Vec::new();
    for (name, current) in model.named_params() {
        match tensors.iter().find(|(n, _)| *n == name) {
            Some((_, t)) if t.shape() == current.shape() => found.push(t.clone()),
            Some((_, t)) => return Err(Error::dims("checkpoint tensor", current.shape(), t.shape())),
            None => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingTensors(missing));
    }
    debug_assert_eq!(found.len(), names.len());
    for (p, t) in model.params_mut().into_iter().zip(found) {
        *p = t;
    }
    Ok(())
}

pub fn checkpoint_load<M: Parameterized + ?Sized>(model: &mut M, path: impl AsRef<Path>) -> Result<()> {
    assign_tensors(model, &read_checkpoint(path)?)
}
