//! Binary tensor container and atomic file writes.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VFPT"                      4 bytes
//! version                     u32 (currently 1)
//! entry count                 u32
//! per entry:
//!   name length               u32
//!   name                      UTF-8 bytes
//!   dtype                     u8 (1 = f64)
//!   rank                      u32
//!   dims                      rank × u64
//!   values                    product(dims) × f64
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"VFPT";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

pub type NamedTensors = Vec<(String, Tensor)>;

pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let bytes: usize = entries
        .iter()
        .map(|(n, t)| 13 + n.len() + 8 * t.rank() + 8 * t.numel())
        .sum();
    let mut out = Vec::with_capacity(12 + bytes);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::Contract(format!("duplicate tensor name `{name}`")));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn fail(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: at as u64,
            msg: msg.into(),
        }
    }
}

pub fn decode(buf: &[u8]) -> Result<NamedTensors> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, expected \"VFPT\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::with_capacity(count.min(1024) as usize);
    let mut seen = HashSet::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.fail(name_at, "name is not valid UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(r.fail(at, format!("duplicate tensor name `{name}`")));
        }
        let dtype_at = r.pos;
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(r.fail(dtype_at, format!("unknown dtype code {dtype}")));
        }
        let rank_at = r.pos;
        let rank = r.u32("rank")? as usize;
        if rank == 0 {
            return Err(r.fail(rank_at, "rank must be positive"));
        }
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let dim_at = r.pos;
            let d = r.u64("dimension")?;
            if d == 0 {
                return Err(r.fail(dim_at, "zero dimension"));
            }
            shape.push(d as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| r.fail(rank_at, "tensor size overflows"))?;
        let raw = r.take(numel, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(r.fail(r.pos, "trailing bytes after last entry"));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode(entries)?)
}

pub fn load(path: impl AsRef<Path>) -> Result<NamedTensors> {
    decode(&fs::read(path)?)
}

pub fn load_map(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    Ok(load(path)?.into_iter().collect())
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedTensors {
        vec![
            ("a".into(), Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5)),
            ("layer.b".into(), Tensor::new(vec![1], vec![f64::MIN_POSITIVE]).unwrap()),
        ]
    }

    #[test]
    fn empty_container_is_valid() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes.len(), 12);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn truncation_reports_field_offset() {
        let bytes = encode(&sample()).unwrap();
        // First entry: name length at 12, name at 16, dtype at 17, rank at 18, dims at 22..38, values at 38.
        let cases = [(3, 0), (10, 8), (14, 12), (17, 17), (30, 30), (40, 38)];
        for (cut, offset) in cases {
            match decode(&bytes[..cut]) {
                Err(Error::Format { offset: o, .. }) => assert_eq!(o, offset, "cut at {cut}"),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn duplicates_rejected() {
        let mut s = sample();
        s.push(s[0].clone());
        assert!(encode(&s).is_err());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes.push(0);
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn save_load_atomic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.vfpt");
        save(&path, &sample()).unwrap();
        assert_eq!(load(&path).unwrap(), sample());
        let names: Vec<_> = fs::read_dir(path.parent().unwrap()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }
}
