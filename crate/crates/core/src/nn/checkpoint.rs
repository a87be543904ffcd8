//! Checkpoint serialization. Little-endian binary layout:
//!
//! header:      8-byte magic `CPLAECKP`, u32 version (= 1), u32 param count
//! per-param:   u32 name length, UTF-8 name bytes, u32 rank,
//!              rank × u32 dims, raw f32 values (row-major)
//!
//! Parameters are written in registration order, so save → load round trips
//! are byte-identical. Loading requires the names, order, and shapes in the
//! file to match the target store exactly (after the same filter).

use super::params::ParamStore;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CPLAECKP";
const VERSION: u32 = 1;

/// Serialize every parameter and buffer whose name passes `keep` (in
/// registration order) to `path`.
pub fn save_filtered<F>(store: &ParamStore<f32>, path: &Path, keep: F) -> Result<()>
where
    F: Fn(&str) -> bool,
{
    let entries: Vec<(&str, &Tensor<f32>)> = store
        .entries()
        .filter(|(name, _, _)| keep(name))
        .map(|(name, tensor, _)| (name, tensor))
        .collect();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn save(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    save_filtered(store, path, |_| true)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Load a checkpoint into `store`, overwriting parameter values in place.
/// Entries whose names are filtered out by `keep` on the store side are not
/// expected in the file; every kept store entry must appear, in order, with
/// an identical shape.
pub fn load_filtered<F>(store: &mut ParamStore<f32>, path: &Path, keep: F) -> Result<()>
where
    F: Fn(&str) -> bool,
{
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { buf: &raw, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let expected: Vec<String> = store
        .entries()
        .filter(|(name, _, _)| keep(name))
        .map(|(name, _, _)| name.to_string())
        .collect();
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "file holds {count} parameters, store expects {}",
            expected.len()
        )));
    }
    for expected_name in expected {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        if name != expected_name {
            return Err(Error::Checkpoint(format!(
                "parameter name mismatch: file has '{name}', store expects '{expected_name}'"
            )));
        }
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let bytes = r.take(numel * 4)?;
        let mut data = Vec::with_capacity(numel);
        for chunk in bytes.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let id = store
            .lookup(&name)
            .ok_or_else(|| Error::Checkpoint(format!("store has no parameter '{name}'")))?;
        if store.get(id).shape() != dims.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for '{name}': file {:?}, store {:?}",
                dims,
                store.get(id).shape()
            )));
        }
        store.set(id, Tensor::new(dims, data)?)?;
    }
    if r.pos != raw.len() {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok(())
}

pub fn load(store: &mut ParamStore<f32>, path: &Path) -> Result<()> {
    load_filtered(store, path, |_| true)
}
