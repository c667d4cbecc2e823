//! Binary named-tensor checkpoints.
//!
//! Layout (little-endian): magic `ICDC`, version `u32`, count `u32`, then per
//! tensor a `u16` name length, UTF-8 name, `u8` rank, `u32` dims and `f64`
//! data.

use std::path::Path;

use icd_core::instance::DatasetStats;
use icd_core::{ParamGroup, Tensor};

use crate::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"ICDC";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| bad(0, "too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| bad(out.len(), "name too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.ndim()).map_err(|_| bad(out.len(), "rank too large"))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| bad(out.len(), "dimension too large"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn bad(offset: usize, reason: &str) -> HarnessError {
    HarnessError::Checkpoint { offset, reason: reason.into() }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(bad(self.pos, &format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(bad(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(bad(4, &format!("unsupported version {version}")));
    }
    let count = r.u32("count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| bad(at + 2, "name is not UTF-8"))?.to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel =
            shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad(r.pos, "size overflow"))?;
        let bytes = r.take(numel.checked_mul(8).ok_or_else(|| bad(r.pos, "size overflow"))?, "data")?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(data, &shape)?));
    }
    if r.pos != buf.len() {
        return Err(bad(r.pos, "trailing bytes"));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(tensors)?).map_err(|e| HarnessError::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path).map_err(|e| HarnessError::io(path, e))?)
}

/// Parameters of `group` under their bare names.
pub fn group_tensors(group: &ParamGroup) -> Vec<(String, Tensor)> {
    group.iter().map(|(k, t)| (k.clone(), t.detach())).collect()
}

/// Copies `tensors` into `group`. Names and shapes must match exactly;
/// nothing is written unless every tensor fits.
pub fn restore_group(group: &ParamGroup, tensors: &[(String, Tensor)]) -> Result<()> {
    let params: Vec<_> = tensors.iter().filter(|(k, _)| !k.starts_with("stats.")).collect();
    if params.len() != group.len() {
        return Err(HarnessError::Config(format!(
            "checkpoint has {} parameters, model has {}",
            params.len(),
            group.len()
        )));
    }
    for (k, t) in &params {
        let p = group.get(k).ok_or_else(|| HarnessError::Config(format!("checkpoint parameter `{k}` not in model")))?;
        if p.shape() != t.shape() {
            return Err(HarnessError::Config(format!(
                "checkpoint parameter `{k}` has shape {:?}, model expects {:?}",
                t.shape(),
                p.shape()
            )));
        }
    }
    for (k, t) in params {
        group.get(k).unwrap().data_mut().copy_from_slice(&t.data());
    }
    Ok(())
}

pub fn stats_tensors(stats: &DatasetStats) -> Result<Vec<(String, Tensor)>> {
    let c = stats.classes();
    Ok(vec![
        ("stats.class_freq".into(), Tensor::new(stats.class_freq.iter().map(|&v| v as f64).collect(), &[c])?),
        ("stats.size_mean".into(), Tensor::new(stats.size_mean.iter().flatten().copied().collect(), &[c, 2])?),
        ("stats.size_std".into(), Tensor::new(stats.size_std.iter().flatten().copied().collect(), &[c, 2])?),
    ])
}

pub fn stats_from_tensors(tensors: &[(String, Tensor)]) -> Option<DatasetStats> {
    let find = |n: &str| tensors.iter().find(|(k, _)| k == n).map(|(_, t)| t.to_vec());
    let freq = find("stats.class_freq")?;
    let pairs = |v: Vec<f64>| v.chunks_exact(2).map(|p| [p[0], p[1]]).collect::<Vec<_>>();
    Some(DatasetStats {
        class_freq: freq.iter().map(|&v| v as usize).collect(),
        size_mean: pairs(find("stats.size_mean")?),
        size_std: pairs(find("stats.size_std")?),
    })
}
