//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "RENCKPT\0"
//! version  u32      currently 1
//! count    u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8), rows u64, cols u64, rows*cols f64 values
//! ```

use std::fs;
use std::path::Path;

use super::{DualNet, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RENCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Contract("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Contract("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Contract(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Contract("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Contract("tensor extent overflows".into()))?;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Contract("tensor extent overflows".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(rows, cols, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Contract("trailing bytes after checkpoint".into()));
    }
    Ok(entries)
}

pub fn save<'a>(path: &Path, sets: impl IntoIterator<Item = &'a ParamSet>) -> Result<()> {
    let bytes = encode(
        sets.into_iter()
            .flat_map(|s| s.tensors().iter().map(|(n, t)| (n.as_str(), t))),
    );
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Overwrites the tensors of `set` from `entries`, matched by position.
pub fn restore(set: &mut ParamSet, entries: &[(String, Tensor)]) -> Result<()> {
    if entries.len() != set.len() {
        return Err(Error::Contract(format!(
            "checkpoint has {} tensors, network expects {}",
            entries.len(),
            set.len()
        )));
    }
    for (i, (name, t)) in entries.iter().enumerate() {
        let slot = set.tensor_mut(i);
        if slot.shape() != t.shape() {
            return Err(Error::Shape {
                op: "restore",
                left: slot.shape(),
                right: t.shape(),
            });
        }
        let _ = name;
        *slot = t.clone();
    }
    Ok(())
}

/// Tensors of a dual network in checkpoint order: student F, student C,
/// then teacher F, teacher C under a `teacher.` prefix.
pub fn dualnet_entries(net: &DualNet) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = net
        .student_f
        .tensors()
        .iter()
        .chain(net.student_c.tensors())
        .cloned()
        .collect();
    if let Some((f, c)) = net.teacher() {
        out.extend(
            f.tensors()
                .iter()
                .chain(c.tensors())
                .map(|(n, t)| (format!("teacher.{n}"), t.clone())),
        );
    }
    out
}

/// Inverse of [`dualnet_entries`] for a network of the same architecture.
pub fn restore_dualnet(net: &mut DualNet, entries: &[(String, Tensor)]) -> Result<()> {
    let (nf, nc) = (net.student_f.len(), net.student_c.len());
    let expected = (nf + nc) * if net.teacher().is_some() { 2 } else { 1 };
    if entries.len() != expected {
        return Err(Error::Contract(format!(
            "checkpoint has {} tensors, network expects {expected}",
            entries.len()
        )));
    }
    restore(&mut net.student_f, &entries[..nf])?;
    restore(&mut net.student_c, &entries[nf..nf + nc])?;
    if let Some((tf, tc)) = net.teacher_mut() {
        restore(tf, &entries[nf + nc..2 * nf + nc])?;
        restore(tc, &entries[2 * nf + nc..])?;
    }
    Ok(())
}
