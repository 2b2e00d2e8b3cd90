//! Flat binary parameter checkpoints.
//!
//! Layout: magic `"UGLD"`, format version (u32 LE), then one record per
//! parameter in sorted-name order: name length (u32 LE), UTF-8 name bytes,
//! rank (u32 LE), extents (u32 LE each), values (f64 LE each). Round-trips
//! are bit-exact. Files are written to a sibling temp path and renamed into
//! place so an interrupted save never leaves a partial checkpoint behind.

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"UGLD";
pub const VERSION: u32 = 1;

/// Serialize all parameter values (gradients are not persisted).
pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    let tmp_name = match path.file_name().and_then(|n| n.to_str()) {
        Some(n) => format!("{n}.tmp"),
        None => return Err(Error::InvalidConfig(format!("bad checkpoint path {path:?}"))),
    };
    let tmp = path.with_file_name(tmp_name);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (name, p) in params.iter() {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            let shape = p.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &e in shape {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for &v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::BadCheckpoint(format!("truncated while reading {what}")))
}

/// Read a u32, returning None on a clean end-of-file boundary.
fn read_u32_opt(r: &mut impl Read) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(Error::BadCheckpoint("truncated record header".into()));
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_or(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

/// Load a checkpoint into a fresh [`ParamSet`].
pub fn load(path: &Path) -> Result<ParamSet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadCheckpoint(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::BadCheckpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mut params = ParamSet::new();
    while let Some(name_len) = read_u32_opt(&mut r)? {
        let mut name_bytes = vec![0u8; name_len as usize];
        read_exact_or(&mut r, &mut name_bytes, "parameter name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::BadCheckpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        if rank > 8 {
            return Err(Error::BadCheckpoint(format!("implausible rank {rank} for {name:?}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact_or(&mut r, &mut buf, "values")?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::BadCheckpoint(format!("invalid tensor for {name:?}: {e}")))?;
        params.insert(&name, tensor).map_err(|e| Error::BadCheckpoint(e.to_string()))?;
    }
    if params.is_empty() {
        return Err(Error::BadCheckpoint("checkpoint holds no parameters".into()));
    }
    Ok(params)
}

/// Load a checkpoint into an existing parameter set, requiring an exact
/// match of names and shapes (the usual "restore into freshly built model").
pub fn load_into(params: &mut ParamSet, path: &Path) -> Result<()> {
    let loaded = load(path)?;
    if loaded.len() != params.len() {
        return Err(Error::BadCheckpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            params.len()
        )));
    }
    for (name, p) in loaded.iter() {
        let target = params.get_mut(name).map_err(|_| {
            Error::BadCheckpoint(format!("checkpoint parameter {name:?} not in model"))
        })?;
        if target.shape() != p.value.shape() {
            return Err(Error::BadCheckpoint(format!(
                "shape mismatch for {name:?}: checkpoint {:?}, model {:?}",
                p.value.shape(),
                target.shape()
            )));
        }
        *target = p.value.clone();
    }
    Ok(())
}
