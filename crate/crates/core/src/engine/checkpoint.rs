//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "FLCK"
//! version      u8       1
//! header_len   u32      length of the UTF-8 header that follows
//! header       bytes    free-form (the model writes its architecture here)
//! entry_count  u32
//! entry*       name_len u16, name bytes, kind u8, ndim u8,
//!              dims u32 * ndim, values f32 * prod(dims)
//! ```

use std::io::{Read, Write};

use super::{Float, ParamKind, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FLCK";
pub const VERSION: u8 = 1;

pub fn write_checkpoint<T: Float, W: Write>(mut w: W, header: &[u8], store: &ParamStore<T>) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize || p.value.shape().len() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("entry `{}` too large to encode", p.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[p.kind.tag(), p.value.shape().len() as u8])?;
        for &d in p.value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.numel() * 4);
        for &v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(b)
}

pub fn read_checkpoint<T: Float, R: Read>(mut r: R) -> Result<(Vec<u8>, ParamStore<T>)> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let [version] = read_exact::<_, 1>(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated entry name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let [tag, ndim] = read_exact::<_, 2>(&mut r)?;
        let kind = ParamKind::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown kind tag {tag}")))?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Checkpoint(format!("truncated values for `{name}`: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        store.insert(name, kind, Tensor::new(shape, data)?)?;
    }
    Ok((header, store))
}
