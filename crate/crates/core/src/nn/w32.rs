//! `.w32` named-tensor files.
//!
//! Layout, all little-endian: magic `SPFW`, u16 version (1), u32 entry count,
//! then per entry: u16 name length, UTF-8 name, u8 rank (always 4), four u32
//! extents, f32 payload in `N,C,H,W` order.

use std::fs;
use std::path::Path;

use super::{NnError, ParamStore, Parameter, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"SPFW";
pub const VERSION: u16 = 1;

pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>, NnError> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_len = u16::try_from(name.len()).map_err(|_| NnError::Format(format!("name too long: {} bytes", name.len())))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(4);
        for extent in tensor.shape().0 {
            let e = u32::try_from(extent).map_err(|_| NnError::Format(format!("extent {extent} exceeds u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            NnError::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, NnError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| NnError::Format(format!("name is not UTF-8: {e}")))?
            .to_owned();
        let rank = r.u8()?;
        if rank != 4 {
            return Err(NnError::Format(format!("entry {name:?} has rank {rank}, expected 4")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let shape = Shape(dims);
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| NnError::Format(format!("entry {name:?} extents overflow")))?;
        let bytes = numel
            .checked_mul(4)
            .ok_or_else(|| NnError::Format(format!("entry {name:?} extents overflow")))?;
        let payload = r.take(bytes)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(NnError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn write_file<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<(), NnError> {
    let bytes = encode(entries)?;
    fs::write(path, bytes).map_err(|e| NnError::Io(path.display().to_string(), e))
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor)>, NnError> {
    let bytes = fs::read(path).map_err(|e| NnError::Io(path.display().to_string(), e))?;
    decode(&bytes)
}

impl ParamStore {
    pub fn to_w32(&self) -> Result<Vec<u8>, NnError> {
        encode(self.iter().map(|p| (p.name.as_str(), &p.value)))
    }

    pub fn from_w32(bytes: &[u8]) -> Result<ParamStore, NnError> {
        Ok(decode(bytes)?.into_iter().map(|(n, t)| Parameter::new(n, t)).collect())
    }
}
