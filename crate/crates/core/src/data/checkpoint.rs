//! Model checkpoints: named 32-bit-float tensors in a flat binary
//! container (magic "HSCK1").
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    5 bytes  "HSCK1"
//! version  u16      currently 1
//! count    u32      number of entries
//! entry*   name_len u16, name bytes (UTF-8, unique),
//!          ndim u8, dims u32 × ndim,
//!          payload f32 × product(dims)
//! ```
//!
//! Optimizer state rides along under names prefixed with [`OPT_PREFIX`];
//! loaders that only want model tensors filter it out with
//! [`split_optimizer_entries`].

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One named tensor: (name, shape, row-major values). Values are carried
/// as f64 in memory for convenience but stored as f32, which is lossless
/// for anything produced by f32 training.
pub type StateEntry = (String, Vec<usize>, Vec<f64>);

/// Name prefix reserved for optimizer state.
pub const OPT_PREFIX: &str = "opt/";

const MAGIC: &[u8; 5] = b"HSCK1";
const VERSION: u16 = 1;

/// Serializes entries to a checkpoint file. Names must be unique.
pub fn save_checkpoint(path: impl AsRef<Path>, entries: &[StateEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::Contract(format!("duplicate tensor name {name:?}")));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::Contract(format!(
                "{name:?}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Contract(format!("tensor name too long: {name:?}")));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint file back into entries, preserving order.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<StateEntry>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 11 || &bytes[..5] != MAGIC {
        return Err(fail("not a checkpoint file (bad magic)"));
    }
    let version = u16::from_le_bytes([bytes[5], bytes[6]]);
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes([bytes[7], bytes[8], bytes[9], bytes[10]]) as usize;
    let mut at = 11usize;
    let mut entries = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    for _ in 0..count {
        if at + 2 > bytes.len() {
            return Err(fail("truncated entry header"));
        }
        let name_len = u16::from_le_bytes([bytes[at], bytes[at + 1]]) as usize;
        at += 2;
        if at + name_len + 1 > bytes.len() {
            return Err(fail("truncated entry name"));
        }
        let name = std::str::from_utf8(&bytes[at..at + name_len])
            .map_err(|_| fail("entry name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(fail(&format!("duplicate tensor name {name:?}")));
        }
        at += name_len;
        let ndim = bytes[at] as usize;
        at += 1;
        if at + 4 * ndim > bytes.len() {
            return Err(fail("truncated shape"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes([
                bytes[at],
                bytes[at + 1],
                bytes[at + 2],
                bytes[at + 3],
            ]) as usize);
            at += 4;
        }
        let n: usize = shape.iter().product();
        if at + 4 * n > bytes.len() {
            return Err(fail(&format!("{name:?}: truncated payload")));
        }
        let data = bytes[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        at += 4 * n;
        entries.push((name, shape, data));
    }
    Ok(entries)
}

/// Splits entries into (model tensors, optimizer tensors) by the reserved
/// name prefix, preserving order within each group.
pub fn split_optimizer_entries(entries: Vec<StateEntry>) -> (Vec<StateEntry>, Vec<StateEntry>) {
    entries
        .into_iter()
        .partition(|(name, _, _)| !name.starts_with(OPT_PREFIX))
}
