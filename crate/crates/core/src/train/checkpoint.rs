//! Little-endian binary checkpoints.
//!
//! Layout: `b"CNFLM"`, format version `u32`, record count `u32`, then per
//! tensor: name length `u32`, UTF-8 name, rank `u32`, extents `u64` each,
//! raw `f64` data.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 5] = b"CNFLM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(w: &mut W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
        }
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("truncated file while reading {what}")))?;
    Ok(buf)
}

fn take_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, what)?))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let magic: [u8; 5] = take(r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = take_u32(r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let count = take_u32(r, "record count")?;
    let mut out = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let len = take_u32(r, "name length")? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Format("truncated file while reading a name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = take_u32(r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(r, "extent")?) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("tensor {name:?} extents overflow")))?;
        let mut data = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            data.push(f64::from_le_bytes(take(r, &name)?));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last record".into()));
    }
    Ok(out)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let tensors: Vec<(String, Tensor)> = store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, &tensors)?;
    f.flush()?;
    Ok(())
}

/// How a checkpoint must cover the store it is loaded into.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    /// Every parameter must be present.
    Exact,
    /// Parameters absent from the file keep their values (warm start from a
    /// model with a different head).
    Transfer,
}

/// Copies a checkpoint into `store`. Unknown names and shape mismatches
/// are errors in both modes. Returns the number of tensors loaded.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path, mode: LoadMode) -> Result<usize> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let records = read_checkpoint(&mut f)?;
    for (name, t) in &records {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Format(format!("unknown tensor {name:?}")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor {name:?} has shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
    }
    if mode == LoadMode::Exact {
        let names: HashSet<&str> = records.iter().map(|(n, _)| n.as_str()).collect();
        if let Some((_, p)) = store.iter().find(|(_, p)| !names.contains(p.name.as_str())) {
            return Err(Error::Format(format!("checkpoint lacks tensor {:?}", p.name)));
        }
    }
    for (name, t) in records.iter() {
        let id = store.id(name).expect("checked above");
        store.set(id, t.clone())?;
    }
    Ok(records.len())
}
