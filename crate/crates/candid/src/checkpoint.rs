//! Binary checkpoint container shared by the trainable network and the
//! training loop.
//!
//! Layout: magic bytes `CNDD`, a 32-bit little-endian version, then a
//! sequence of records: name length (u32 LE), UTF-8 name, rank (u32 LE),
//! dims (u32 LE each), raw 32-bit LE float data. Round-trips bit-exactly.

use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CNDD";
pub const VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint entry {0} not found")]
    MissingEntry(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// One named tensor record.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        self.entries.push(Entry { name: name.into(), dims, data });
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::MissingEntry(name.to_string()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(CheckpointError::Corrupt("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Corrupt(format!("unsupported version {version}")));
        }
        let mut entries = Vec::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            if name_len == 0 || name_len > MAX_NAME_LEN {
                return Err(CheckpointError::Corrupt(format!("bad name length {name_len}")));
            }
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| CheckpointError::Corrupt("name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(CheckpointError::Corrupt(format!("bad rank {rank} for {name}")));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut count: usize = 1;
            for _ in 0..rank {
                let d = cur.u32()? as usize;
                count = count
                    .checked_mul(d)
                    .filter(|&c| c <= bytes.len())
                    .ok_or_else(|| CheckpointError::Corrupt(format!("oversized dims for {name}")))?;
                dims.push(d);
            }
            if count == 0 {
                return Err(CheckpointError::Corrupt(format!("zero extent in {name}")));
            }
            let raw = cur.take(count * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if !data.iter().all(|v| v.is_finite()) {
                return Err(CheckpointError::Corrupt(format!("non-finite value in {name}")));
            }
            entries.push(Entry { name, dims, data });
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::util::write_atomic(path, &self.encode())
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Checkpoint::decode(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
