//! Checkpoint container: parameters plus the training step counter.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "AVCP"
//! version u32      currently 1
//! step    u64      training step the parameters correspond to
//! count   u32      number of parameter entries
//! entry table, repeated `count` times:
//!   name_len u32, name bytes (UTF-8),
//!   ndim u32, dims u32 x ndim
//! payloads: for each entry in table order, prod(dims) f32 values
//! ```
//!
//! Values are stored as f32, so a save/load round trip is lossy at the 1e-7
//! relative level — fine for weights, and it halves file size.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"AVCP";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, store: &ParamStore, step: u64) -> Result<()> {
    let ctx = || format!("writing checkpoint {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);

    w.write_all(MAGIC).map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&VERSION.to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&step.to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&(store.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;

    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(|e| Error::io(ctx(), e))?;
        w.write_all(name.as_bytes()).map_err(|e| Error::io(ctx(), e))?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())
            .map_err(|e| Error::io(ctx(), e))?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())
                .map_err(|e| Error::io(ctx(), e))?;
        }
    }
    for (_, t) in store.iter() {
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| Error::io(ctx(), e))?;
        }
    }
    w.flush().map_err(|e| Error::io(ctx(), e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, u64)> {
    let ctx = || format!("reading checkpoint {}", path.display());
    let file = File::open(path).map_err(|e| Error::io(ctx(), e))?;
    let mut r = BufReader::new(file);
    let fmt = |detail: &str| Error::Format {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| fmt("truncated header"))?;
    if &magic != MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = read_u32(&mut r).ok_or_else(|| fmt("truncated header"))?;
    if version != VERSION {
        return Err(fmt(&format!("unsupported version {}", version)));
    }
    let step = read_u64(&mut r).ok_or_else(|| fmt("truncated header"))?;
    let count = read_u32(&mut r).ok_or_else(|| fmt("truncated header"))? as usize;

    let mut entries: Vec<(String, Vec<usize>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r).ok_or_else(|| fmt("truncated entry table"))? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| fmt("truncated entry table"))?;
        let name = String::from_utf8(name).map_err(|_| fmt("non-UTF-8 parameter name"))?;
        let ndim = read_u32(&mut r).ok_or_else(|| fmt("truncated entry table"))? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut r).ok_or_else(|| fmt("truncated entry table"))? as usize);
        }
        entries.push((name, dims));
    }

    let mut store = ParamStore::new();
    for (name, dims) in entries {
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|_| fmt("truncated payload"))?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        store.insert(name, Tensor::from_vec(dims, data)?);
    }
    Ok((store, step))
}

fn read_u32(r: &mut impl Read) -> Option<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).ok()?;
    Some(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Option<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).ok()?;
    Some(u64::from_le_bytes(buf))
}
