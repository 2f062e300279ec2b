//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "FTPCKPT\0"
//! version    u32
//! checksum   u32      CRC-32 of everything after this field
//! length     u64      payload byte count
//! payload    spec_hash u64, iteration u64, count u32,
//!            then per array: name_len u32, name (UTF-8), rows u64, cols u64,
//!            rows*cols f64 values
//! ```
//!
//! Integers that must survive exactly (seeds, counters) are stored as the
//! bit patterns of f64 values.

use std::fs;
use std::io::Write;
use std::path::Path;

use ftp_core::DenseMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FTPCKPT\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec_hash: u64,
    pub iteration: u64,
    pub arrays: Vec<(String, DenseMatrix)>,
}

impl Checkpoint {
    pub fn new(spec_hash: u64, iteration: u64) -> Self {
        Self {
            spec_hash,
            iteration,
            arrays: Vec::new(),
        }
    }

    pub fn put(&mut self, name: impl Into<String>, value: DenseMatrix) {
        self.arrays.push((name.into(), value));
    }

    /// Stores raw values, including non-finite ones, without validation.
    pub fn put_scalars(&mut self, name: impl Into<String>, values: &[f64]) {
        let mut raw = DenseMatrix::zeros(1, values.len());
        raw.as_mut_slice().copy_from_slice(values);
        self.put(name, raw);
    }

    pub fn put_u64s(&mut self, name: impl Into<String>, values: &[u64]) {
        let bits: Vec<f64> = values.iter().map(|&v| f64::from_bits(v)).collect();
        self.put_scalars(name, &bits);
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&DenseMatrix> {
        self.get(name)
            .ok_or_else(|| Error::persistence(format!("checkpoint has no array `{name}`")))
    }

    pub fn scalars(&self, name: &str) -> Result<&[f64]> {
        Ok(self.require(name)?.as_slice())
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        Ok(self.scalars(name)?.iter().map(|v| v.to_bits()).collect())
    }

    /// Arrays whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a DenseMatrix)> + 'a {
        self.arrays
            .iter()
            .filter_map(move |(n, m)| n.strip_prefix(prefix).map(|rest| (rest, m)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        payload.extend_from_slice(&self.spec_hash.to_le_bytes());
        payload.extend_from_slice(&self.iteration.to_le_bytes());
        payload.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, m) in &self.arrays {
            payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
            payload.extend_from_slice(name.as_bytes());
            payload.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            payload.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let length = (payload.len() as u64).to_le_bytes();
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&length);
        hasher.update(&payload);

        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&hasher.finalize().to_le_bytes());
        out.extend_from_slice(&length);
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::persistence(
                "checksum failure: file shorter than its header",
            ));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::persistence("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::persistence(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let stored = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let actual = crc32fast::hash(&bytes[16..]);
        if stored != actual {
            return Err(Error::persistence(format!(
                "checksum failure: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let length = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let mut r = Reader {
            buf: &bytes[HEADER_LEN..],
            pos: 0,
        };
        if r.buf.len() != length {
            return Err(Error::persistence(
                "declared payload length does not match file size",
            ));
        }
        let spec_hash = r.u64()?;
        let iteration = r.u64()?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::persistence("array name is not UTF-8"))?
                .to_string();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::persistence("array dimensions overflow"))?;
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::persistence("array too large"))?,
            )?;
            let mut m = DenseMatrix::zeros(rows, cols);
            let dst = m.as_mut_slice();
            for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
                *d = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            arrays.push((name, m));
        }
        if r.pos != r.buf.len() {
            return Err(Error::persistence("trailing bytes after the last array"));
        }
        Ok(Self {
            spec_hash,
            iteration,
            arrays,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.encode())
            .map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::persistence("payload ends inside an array"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(0xdead_beef, 42);
        c.put(
            "param/a",
            DenseMatrix::from_rows(&[vec![1.0, -0.0], vec![1e-310, 3.5]]).unwrap(),
        );
        c.put("empty", DenseMatrix::zeros(0, 3));
        c.put_u64s("rng", &[u64::MAX, 0, 7]);
        c.put_scalars("gamma/a", &[0.25, f64::NAN]);
        c
    }

    fn bits(c: &Checkpoint) -> Vec<(String, Vec<u64>)> {
        c.arrays
            .iter()
            .map(|(n, m)| {
                (
                    n.clone(),
                    m.as_slice().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back.spec_hash, c.spec_hash);
        assert_eq!(back.iteration, 42);
        assert_eq!(bits(&back), bits(&c));
        assert_eq!(back.u64s("rng").unwrap(), vec![u64::MAX, 0, 7]);
        assert!(back.scalars("gamma/a").unwrap()[1].is_nan());
    }

    #[test]
    fn every_truncation_rejected() {
        let bytes = sample().encode();
        for cut in 0..bytes.len() {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn corruption_and_version_rejected() {
        let mut bytes = sample().encode();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        let err = Checkpoint::decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");

        let mut bytes = sample().encode();
        bytes[8] = 9;
        assert!(Checkpoint::decode(&bytes)
            .unwrap_err()
            .to_string()
            .contains("version"));

        let mut bytes = sample().encode();
        bytes[0] = b'X';
        assert!(Checkpoint::decode(&bytes)
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/run.ckpt");
        sample().save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(bits(&back), bits(&sample()));
        assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
    }
}
