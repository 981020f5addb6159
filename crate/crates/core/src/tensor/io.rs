//! Binary tensor serialization.
//!
//! Record layout: magic `TSR1`, u32 rank, u32 per-axis dims, then the f64
//! payload in row-major order. All integers and floats are little-endian.
//!
//! A container file is a sequence of such records; a JSON sidecar alongside
//! it (same path with `.json` appended) maps record id → byte offset. Ids
//! are written in sorted order so containers are byte-stable across reruns.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TSR1";

/// Ranks above this are accepted on read only if squeezing singleton axes
/// brings them back within it (a `[n,1,d]` file loads as `[n,d]`).
const MAX_RANK: usize = 2;

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    read_tensor_inner(r).map_err(|e| match e {
        Error::Parse { msg, .. } => Error::parse(msg),
        other => other,
    })
}

fn read_tensor_inner(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::parse(format!(
            "bad tensor magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let rank = read_u32(r, "rank")? as usize;
    if rank > 8 {
        return Err(Error::parse(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for axis in 0..rank {
        let d = read_u32(r, "dims")? as usize;
        if d == 0 {
            return Err(Error::parse(format!("zero-sized axis {axis}")));
        }
        shape.push(d);
    }
    // Files written at higher rank load if singleton axes squeeze away.
    if shape.len() > MAX_RANK {
        let squeezed: Vec<usize> = shape.iter().copied().filter(|&d| d != 1).collect();
        if squeezed.len() > MAX_RANK {
            return Err(Error::parse(format!(
                "rank-{} tensor {:?} does not squeeze to rank ≤ {MAX_RANK}",
                shape.len(),
                shape
            )));
        }
        shape = squeezed;
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::parse("tensor size overflows"))?;
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        read_exact(r, &mut buf, "payload")?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(shape, data)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::parse(format!("truncated tensor record at {what}: {e}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut BufReader::new(f)).map_err(|e| e.with_path(path))
}

pub fn sidecar_path(container: &Path) -> PathBuf {
    let mut name = container.as_os_str().to_os_string();
    name.push(".json");
    PathBuf::from(name)
}

/// Write named tensors as one container plus its id→offset sidecar.
/// Records land in sorted-id order regardless of input order.
pub fn write_container(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut offsets: BTreeMap<&str, u64> = BTreeMap::new();
    let mut pos = 0u64;
    for (id, t) in entries {
        offsets.insert(id, pos);
        write_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
        pos += record_len(t);
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&offsets)
        .expect("offset map serializes");
    std::fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

fn record_len(t: &Tensor) -> u64 {
    (4 + 4 + 4 * t.shape().len() + 8 * t.numel()) as u64
}

/// Read every record of a container, in sorted-id order.
pub fn read_container(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let side = sidecar_path(path);
    let raw = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let offsets: BTreeMap<String, u64> = serde_json::from_str(&raw)
        .map_err(|e| Error::parse(format!("container sidecar: {e}")).with_path(&side))?;

    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut out = BTreeMap::new();
    for (id, &off) in &offsets {
        r.seek(SeekFrom::Start(off)).map_err(|e| Error::io(path, e))?;
        let t = read_tensor(&mut r)
            .map_err(|e| e.with_path(path).with_context(&format!("record `{id}`")))?;
        out.insert(id.clone(), t);
    }
    Ok(out)
}
