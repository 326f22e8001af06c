//! Multi-tensor archive: named tensors plus string metadata in one
//! file. Used for model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"FARC"
//! version u16 (currently 1)
//! n_meta  u32, then per entry (sorted by key):
//!         key_len u16, key utf-8, val_len u32, val utf-8
//! n_tens  u32, then per entry (sorted by name):
//!         name_len u16, name utf-8, payload_len u64, payload (tensor
//!         in the single-tensor container format)
//! ```
//!
//! Entries are kept in sorted maps so serialization is canonical: two
//! archives with equal contents produce identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::ften::{self, FtenError};
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: [u8; 4] = *b"FARC";
pub const ARCHIVE_VERSION: u16 = 1;

const MAX_ENTRIES: u32 = 1_000_000;
const MAX_NAME_LEN: usize = 4096;
const MAX_META_VAL_LEN: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive truncated while reading {0}")]
    Truncated(&'static str),
    #[error("bad archive magic")]
    BadMagic,
    #[error("unsupported archive version {0} (supported: {ARCHIVE_VERSION})")]
    BadVersion(u16),
    #[error("archive entry count {0} exceeds limit {MAX_ENTRIES}")]
    TooManyEntries(u32),
    #[error("archive name/key invalid: {0}")]
    BadName(String),
    #[error("duplicate archive entry '{0}'")]
    Duplicate(String),
    #[error("archive has {0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error("tensor entry '{name}': {source}")]
    Entry {
        name: String,
        #[source]
        source: FtenError,
    },
    #[error("io error for {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ArchiveError> = std::result::Result<T, E>;

/// Named tensors plus metadata, canonically ordered.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_tensor(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn insert_meta(&mut self, key: &str, val: &str) {
        self.meta.insert(key.to_string(), val.to_string());
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| ArchiveError::BadName(format!("missing tensor entry '{name}'")))
    }

    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ArchiveError::BadName(format!("missing metadata key '{key}'")))
    }

    // ── Serialization ────────────────────────────────────────────────

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let payload = ften::to_bytes(t);
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, what: &'static str| -> Result<&[u8]> {
            let end = pos.checked_add(n).ok_or(ArchiveError::Truncated(what))?;
            if end > bytes.len() {
                return Err(ArchiveError::Truncated(what));
            }
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        let take_u16 = |pos: &mut usize, what: &'static str| -> Result<u16> {
            let b = take(pos, 2, what)?;
            Ok(u16::from_le_bytes([b[0], b[1]]))
        };
        let take_u32 = |pos: &mut usize, what: &'static str| -> Result<u32> {
            let b = take(pos, 4, what)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let take_u64 = |pos: &mut usize, what: &'static str| -> Result<u64> {
            let b = take(pos, 8, what)?;
            Ok(u64::from_le_bytes(b.try_into().unwrap()))
        };
        let take_str = |pos: &mut usize, len: usize, what: &'static str| -> Result<String> {
            if len > MAX_NAME_LEN.max(MAX_META_VAL_LEN) {
                return Err(ArchiveError::BadName(format!("{what} length {len} too large")));
            }
            let b = take(pos, len, what)?;
            String::from_utf8(b.to_vec())
                .map_err(|_| ArchiveError::BadName(format!("{what} is not valid UTF-8")))
        };

        if take(&mut pos, 4, "magic")? != ARCHIVE_MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let version = take_u16(&mut pos, "version")?;
        if version != ARCHIVE_VERSION {
            return Err(ArchiveError::BadVersion(version));
        }

        let mut meta = BTreeMap::new();
        let n_meta = take_u32(&mut pos, "meta count")?;
        if n_meta > MAX_ENTRIES {
            return Err(ArchiveError::TooManyEntries(n_meta));
        }
        for _ in 0..n_meta {
            let klen = take_u16(&mut pos, "meta key length")? as usize;
            if klen > MAX_NAME_LEN {
                return Err(ArchiveError::BadName(format!("meta key length {klen} too large")));
            }
            let key = take_str(&mut pos, klen, "meta key")?;
            let vlen = take_u32(&mut pos, "meta value length")? as usize;
            if vlen > MAX_META_VAL_LEN {
                return Err(ArchiveError::BadName(format!(
                    "meta value length {vlen} too large"
                )));
            }
            let val = take_str(&mut pos, vlen, "meta value")?;
            if meta.insert(key.clone(), val).is_some() {
                return Err(ArchiveError::Duplicate(key));
            }
        }

        let mut tensors = BTreeMap::new();
        let n_tens = take_u32(&mut pos, "tensor count")?;
        if n_tens > MAX_ENTRIES {
            return Err(ArchiveError::TooManyEntries(n_tens));
        }
        for _ in 0..n_tens {
            let nlen = take_u16(&mut pos, "tensor name length")? as usize;
            if nlen > MAX_NAME_LEN {
                return Err(ArchiveError::BadName(format!(
                    "tensor name length {nlen} too large"
                )));
            }
            let name = take_str(&mut pos, nlen, "tensor name")?;
            let plen = take_u64(&mut pos, "tensor payload length")?;
            let plen = usize::try_from(plen).map_err(|_| ArchiveError::Truncated("payload"))?;
            let payload = take(&mut pos, plen, "tensor payload")?;
            let t = ften::from_bytes(payload).map_err(|source| ArchiveError::Entry {
                name: name.clone(),
                source,
            })?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(ArchiveError::Duplicate(name));
            }
        }

        if pos != bytes.len() {
            return Err(ArchiveError::TrailingBytes(bytes.len() - pos));
        }
        Ok(TensorArchive { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ArchiveError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| ArchiveError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

// ── Tests ────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn sample() -> TensorArchive {
        let mut a = TensorArchive::new();
        a.insert_meta("preset", "mini-res-a");
        a.insert_meta("epoch", "7");
        a.insert_tensor(
            "stem.weight",
            Tensor::create(&[4, 3, 3, 3], Init::Uniform { seed: 1, lo: -1.0, hi: 1.0 }).unwrap(),
        );
        a.insert_tensor("stem.bias", Tensor::from_vec(vec![4], vec![0.0, 0.1, -0.2, 0.3]).unwrap());
        a
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let a = sample();
        let bytes = a.to_bytes();
        let b = TensorArchive::from_bytes(&bytes).unwrap();
        assert_eq!(a.meta, b.meta);
        assert_eq!(a.tensors.len(), b.tensors.len());
        for (name, t) in &a.tensors {
            let u = b.tensor(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            let ta: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let ub: Vec<u32> = u.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ta, ub);
        }
        // Canonical: re-serialization is byte-identical.
        assert_eq!(bytes, b.to_bytes());
    }

    #[test]
    fn insertion_order_does_not_change_bytes() {
        let a = sample();
        let mut b = TensorArchive::new();
        b.insert_tensor("stem.bias", a.tensor("stem.bias").unwrap().clone());
        b.insert_meta("epoch", "7");
        b.insert_tensor("stem.weight", a.tensor("stem.weight").unwrap().clone());
        b.insert_meta("preset", "mini-res-a");
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn corrupt_inputs_are_rejected_not_panics() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            TensorArchive::from_bytes(&bytes[..3]),
            Err(ArchiveError::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TensorArchive::from_bytes(&bad), Err(ArchiveError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9; // version
        assert!(matches!(TensorArchive::from_bytes(&bad), Err(ArchiveError::BadVersion(9))));
        // Truncate mid-tensor.
        let cut = bytes.len() - 5;
        assert!(TensorArchive::from_bytes(&bytes[..cut]).is_err());
        // Trailing garbage.
        let mut bad = bytes.clone();
        bad.extend_from_slice(b"junk");
        assert!(matches!(
            TensorArchive::from_bytes(&bad),
            Err(ArchiveError::TrailingBytes(4))
        ));
        // Absurd meta count must not allocate.
        let mut bad = bytes[..6].to_vec();
        bad.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            TensorArchive::from_bytes(&bad),
            Err(ArchiveError::TooManyEntries(_))
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.farc");
        let a = sample();
        a.save(&path).unwrap();
        let b = TensorArchive::load(&path).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn missing_entry_lookup_names_entry() {
        let a = sample();
        let err = a.tensor("nope").unwrap_err();
        assert!(err.to_string().contains("nope"));
        let err = a.meta_value("nope").unwrap_err();
        assert!(err.to_string().contains("nope"));
    }
}
