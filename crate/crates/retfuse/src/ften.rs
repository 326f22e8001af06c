//! FTEN tensor file format.
//!
//! Layout: magic `FTEN`, format version (u16 LE), rank (u16 LE), one u64 LE
//! extent per dim, then the raw little-endian f32 buffer, row-major.
//! Encoding then decoding is bit-exact. The decoder treats input as
//! untrusted: it validates sizes before allocating and never panics.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const FTEN_MAGIC: [u8; 4] = *b"FTEN";
pub const FTEN_VERSION: u16 = 1;

/// Decoder guard: no realistic desk-scale tensor exceeds this rank.
pub const MAX_RANK: u16 = 16;

#[derive(Debug, Error)]
pub enum FtenError {
    #[error("truncated FTEN data ({context})")]
    Truncated { context: &'static str },
    #[error("bad magic bytes, not an FTEN file")]
    BadMagic,
    #[error("unsupported FTEN version {0}")]
    BadVersion(u16),
    #[error("rank {0} exceeds maximum {MAX_RANK}")]
    RankTooLarge(u16),
    #[error("extent {0} is invalid (zero or too large)")]
    BadExtent(u64),
    #[error("declared shape needs {expected} payload bytes, found {found}")]
    PayloadMismatch { expected: u64, found: usize },
    #[error("payload contains a non-finite value at element {0}")]
    NonFinite(usize),
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Serialize a tensor into FTEN bytes.
pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + t.rank() * 8 + t.numel() * 4);
    out.extend_from_slice(&FTEN_MAGIC);
    out.extend_from_slice(&FTEN_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode FTEN bytes. The whole buffer must be consumed exactly.
pub fn from_bytes(bytes: &[u8]) -> Result<Tensor, FtenError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, ctx: &'static str| -> Result<&[u8], FtenError> {
        let end = pos.checked_add(n).ok_or(FtenError::Truncated { context: ctx })?;
        if end > bytes.len() {
            return Err(FtenError::Truncated { context: ctx });
        }
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };

    let magic = take(&mut pos, 4, "magic")?;
    if magic != FTEN_MAGIC {
        return Err(FtenError::BadMagic);
    }
    let version = u16::from_le_bytes(take(&mut pos, 2, "version")?.try_into().unwrap());
    if version != FTEN_VERSION {
        return Err(FtenError::BadVersion(version));
    }
    let rank = u16::from_le_bytes(take(&mut pos, 2, "rank")?.try_into().unwrap());
    if rank > MAX_RANK {
        return Err(FtenError::RankTooLarge(rank));
    }

    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let e = u64::from_le_bytes(take(&mut pos, 8, "extent")?.try_into().unwrap());
        if e == 0 || e > usize::MAX as u64 {
            return Err(FtenError::BadExtent(e));
        }
        numel = numel.checked_mul(e).ok_or(FtenError::BadExtent(e))?;
        shape.push(e as usize);
    }

    let expected = numel.checked_mul(4).ok_or(FtenError::BadExtent(numel))?;
    let found = bytes.len() - pos;
    if expected != found as u64 {
        return Err(FtenError::PayloadMismatch { expected, found });
    }

    let mut data = Vec::with_capacity(numel as usize);
    for (i, chunk) in bytes[pos..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FtenError::NonFinite(i));
        }
        data.push(v);
    }
    // Shape and length were validated above; finiteness just now.
    Ok(Tensor::from_vec(shape, data).expect("validated FTEN payload"))
}

pub fn save(t: &Tensor, path: &Path) -> Result<(), FtenError> {
    let bytes = to_bytes(t);
    let mut f = fs::File::create(path).map_err(|source| FtenError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(&bytes).map_err(|source| FtenError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Tensor, FtenError> {
    let bytes = fs::read(path).map_err(|source| FtenError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let t = Tensor::from_vec(
            vec![2, 3],
            vec![0.0, -1.5, 3.25, f32::MIN_POSITIVE, 1e30, -0.0],
        )
        .unwrap();
        let bytes = to_bytes(&t);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.shape(), t.shape());
        // Compare raw bits, not float equality (-0.0 must survive).
        let lhs: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let rhs: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(7.5).unwrap();
        let back = from_bytes(&to_bytes(&t)).unwrap();
        assert_eq!(back.rank(), 0);
        assert_eq!(back.item().unwrap(), 7.5);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let t = Tensor::zeros(&[2]);
        let mut bytes = to_bytes(&t);
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(FtenError::BadMagic)));
        let mut bytes = to_bytes(&t);
        bytes[4] = 9;
        assert!(matches!(from_bytes(&bytes), Err(FtenError::BadVersion(_))));
    }

    #[test]
    fn rejects_size_lies() {
        let t = Tensor::zeros(&[2, 2]);
        let mut bytes = to_bytes(&t);
        bytes.pop(); // short payload
        assert!(matches!(from_bytes(&bytes), Err(FtenError::PayloadMismatch { .. })));
        let mut bytes = to_bytes(&t);
        bytes.push(0); // trailing garbage
        assert!(matches!(from_bytes(&bytes), Err(FtenError::PayloadMismatch { .. })));
        // Huge extent must fail before allocating.
        let mut bytes = to_bytes(&Tensor::zeros(&[1]));
        bytes[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(from_bytes(&bytes).is_err());
    }

    #[test]
    fn rejects_non_finite_payload() {
        let t = Tensor::zeros(&[1]);
        let mut bytes = to_bytes(&t);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(from_bytes(&bytes), Err(FtenError::NonFinite(0))));
    }

    #[test]
    fn file_io_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ften");
        let t = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        save(&t, &path).unwrap();
        assert_eq!(load(&path).unwrap(), t);
        assert!(load(&dir.path().join("missing.ften")).is_err());
    }
}
