//! Named-tensor checkpoint format.
//!
//! ```text
//! "INFU1"                      magic, 5 bytes
//! u32 version                  currently 1
//! u32 count
//! count × { u32 name_len, name (UTF-8), u32 rank, rank × u32 extent }
//! payload: f32 values of every tensor in header order
//! u32 CRC-32 of the payload
//! ```
//! All integers and floats are little-endian. Names are unique and sorted,
//! so a store has exactly one encoding.

use std::path::Path;

use infu_tensor::Tensor;

use crate::error::{InfuError, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 5] = b"INFU1";
pub const VERSION: u32 = 1;

fn bad(field: &'static str, reason: impl Into<String>) -> InfuError {
    InfuError::Checkpoint {
        field,
        reason: reason.into(),
    }
}

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(
        &u32::try_from(store.len())
            .map_err(|_| bad("count", "too many tensors"))?
            .to_le_bytes(),
    );
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(
                &u32::try_from(e)
                    .map_err(|_| bad("extent", format!("{name} too large")))?
                    .to_le_bytes(),
            );
        }
    }
    let start = out.len();
    for (_, t) in store.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(field, "file truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(bad("magic", "not an INFU1 checkpoint"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(bad("version", format!("unsupported version {version}")));
    }
    let count = c.u32("count")? as usize;
    let mut header: Vec<(String, Vec<usize>)> = Vec::new();
    for _ in 0..count {
        let len = c.u32("name")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| bad("name", "not UTF-8"))?
            .to_string();
        if let Some((prev, _)) = header.last() {
            if *prev >= name {
                return Err(bad("name", format!("{name:?} out of order or duplicated")));
            }
        }
        let rank = c.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| c.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape.contains(&0) {
            return Err(bad("extent", format!("{name} has a zero extent")));
        }
        header.push((name, shape));
    }
    let numel: usize = header
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    let payload = c.take(
        numel
            .checked_mul(4)
            .ok_or_else(|| bad("payload", "too large"))?,
        "payload",
    )?;
    let crc = c.u32("crc")?;
    if c.pos != bytes.len() {
        return Err(bad("crc", "trailing bytes after checksum"));
    }
    if crc32fast::hash(payload) != crc {
        return Err(bad("crc", "payload checksum mismatch"));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64);
    let mut store = ParamStore::new();
    for (name, shape) in header {
        let n = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode(store)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    decode(&std::fs::read(path)?)
}

/// CRC-32 of the encoded store without its trailing checksum, as 8 hex
/// digits.
pub fn fingerprint(store: &ParamStore) -> Result<String> {
    let bytes = encode(store)?;
    Ok(format!(
        "{:08x}",
        crc32fast::hash(&bytes[..bytes.len() - 4])
    ))
}
