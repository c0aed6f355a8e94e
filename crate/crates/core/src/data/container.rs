//! Portable named-tensor files for weights and checkpoints.
//!
//! Byte layout, little-endian throughout:
//!
//! ```text
//! header   "MFGT"            4 bytes magic
//!          version           u32 (currently 1)
//!          count             u32
//! entry    name_len          u16
//!          name              name_len bytes, UTF-8
//!          dtype             u8 (0 = f32, 1 = f64, 2 = u8)
//!          rank              u8
//!          dims              rank × u64
//!          payload           Π dims × size_of(dtype) bytes, row-major
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::scalar::{DType, Element, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MFGT";
pub const VERSION: u32 = 1;
/// Bytes before the first entry.
pub const HEADER_LEN: usize = 12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ContainerError {
    #[error("bad magic {found:?}, expected \"MFGT\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("truncated container: {what} needs {needed} bytes at offset {offset}, {available} left")]
    Truncated {
        what: String,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {name:?}: unknown dtype code {code}")]
    BadDtype { name: String, code: u8 },
    #[error("tensor name is not valid UTF-8 at offset {0}")]
    BadName(usize),
    #[error("tensor name {0:?} longer than 65535 bytes")]
    NameTooLong(String),
    #[error("{0} trailing bytes after last entry")]
    Trailing(usize),
}

/// A tensor of any storable element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            Self::F32(_) => DType::F32,
            Self::F64(_) => DType::F64,
            Self::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Self::F32(t) => t.shape(),
            Self::F64(t) => t.shape(),
            Self::U8(t) => t.shape(),
        }
    }

    /// Store a float tensor under its own dtype.
    pub fn from_float<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => Self::F32(t.cast()),
            _ => Self::F64(t.cast()),
        }
    }

    /// Convert to a float tensor; integer payloads are converted by value.
    pub fn to_float<T: Scalar>(&self) -> Result<Tensor<T>> {
        Ok(match self {
            Self::F32(t) => t.cast(),
            Self::F64(t) => t.cast(),
            Self::U8(t) => t.map(|v| T::lit(v as f64)),
        })
    }

    pub fn as_u8(&self) -> Option<&Tensor<u8>> {
        match self {
            Self::U8(t) => Some(t),
            _ => None,
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        fn put<E: Element>(t: &Tensor<E>, out: &mut Vec<u8>) {
            for v in t.data() {
                v.write_le(out);
            }
        }
        match self {
            Self::F32(t) => put(t, out),
            Self::F64(t) => put(t, out),
            Self::U8(t) => put(t, out),
        }
    }
}

/// Serialize named tensors; names must be unique.
pub fn encode(entries: &[(String, AnyTensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        if !seen.insert(name.as_str()) {
            return Err(ContainerError::DuplicateName(name.clone()).into());
        }
        let len = u16::try_from(name.len()).map_err(|_| ContainerError::NameTooLong(name.clone()))?;
        if t.shape().len() > u8::MAX as usize {
            return Err(Error::Invalid(format!("tensor {name:?}: rank {} too large", t.shape().len())));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype().code());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        t.write_payload(&mut out);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> std::result::Result<&'a [u8], ContainerError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(ContainerError::Truncated {
                what: what(),
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, ContainerError> {
        Ok(self.take(1, || what.to_string())?[0])
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2, || what.to_string())?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, || what.to_string())?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, || what.to_string())?.try_into().unwrap()))
    }
}

fn read_payload<E: Element>(bytes: &[u8], shape: Vec<usize>) -> Result<Tensor<E>> {
    let data = bytes.chunks_exact(E::DTYPE.size_of()).map(E::read_le).collect();
    Tensor::from_vec(shape, data)
}

/// Parse a container; the magic is checked before anything else is read.
pub fn decode(buf: &[u8]) -> Result<Vec<(String, AnyTensor)>> {
    if buf.len() < 4 || buf[..4] != MAGIC {
        return Err(ContainerError::BadMagic {
            found: buf[..buf.len().min(4)].to_vec(),
        }
        .into());
    }
    let mut r = Reader { buf, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(ContainerError::Version(version).into());
    }
    let count = r.u32("entry count")?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for i in 0..count {
        let len = r.u16(&format!("name length of entry {i}"))? as usize;
        let at = r.pos;
        let name_bytes = r.take(len, || format!("name of entry {i}"))?;
        let name = std::str::from_utf8(name_bytes).map_err(|_| ContainerError::BadName(at))?.to_string();
        let code = r.u8(&format!("dtype of {name:?}"))?;
        let dtype = DType::from_code(code).ok_or_else(|| ContainerError::BadDtype { name: name.clone(), code })?;
        let rank = r.u8(&format!("rank of {name:?}"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&format!("dims of {name:?}"))? as usize);
        }
        let needed = shape
            .iter()
            .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
            .unwrap_or(usize::MAX);
        let bytes = r.take(needed, || format!("payload of {name:?}"))?;
        if !seen.insert(name.clone()) {
            return Err(ContainerError::DuplicateName(name).into());
        }
        let t = match dtype {
            DType::F32 => AnyTensor::F32(read_payload(bytes, shape)?),
            DType::F64 => AnyTensor::F64(read_payload(bytes, shape)?),
            DType::U8 => AnyTensor::U8(read_payload(bytes, shape)?),
        };
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(ContainerError::Trailing(buf.len() - r.pos).into());
    }
    Ok(out)
}

/// Write atomically (temp file then rename).
pub fn save_container(path: &Path, entries: &[(String, AnyTensor)]) -> Result<()> {
    write_atomic(path, &encode(entries)?)
}

pub fn load_container(path: &Path) -> Result<Vec<(String, AnyTensor)>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, AnyTensor)> {
        vec![
            ("w".into(), AnyTensor::F32(Tensor::from_vec([2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap())),
            ("b".into(), AnyTensor::F64(Tensor::from_vec([3], vec![0.1, f64::NAN, -2.0]).unwrap())),
            ("rng".into(), AnyTensor::U8(Tensor::from_vec([4], vec![0, 1, 254, 255]).unwrap())),
            ("s".into(), AnyTensor::F64(Tensor::scalar(7.0))),
        ]
    }

    #[test]
    fn empty_container_roundtrips() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn byte_count_matches_layout() {
        let t = AnyTensor::F32(Tensor::zeros([2, 2]));
        let bytes = encode(&[("w".into(), t)]).unwrap();
        // name_len + name + dtype + rank + 2 dims, then the payload
        let entry_header = 2 + 1 + 1 + 1 + 2 * 8;
        assert_eq!(bytes.len(), HEADER_LEN + entry_header + 16);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let entries = sample();
        let bytes = encode(&entries).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.dtype(), t1.dtype());
            assert_eq!(t0.shape(), t1.shape());
        }
    }

    #[test]
    fn distinct_diagnostics() {
        let mut bad = encode(&sample()).unwrap();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Container(ContainerError::BadMagic { .. }))));

        let good = encode(&sample()).unwrap();
        let cut = &good[..good.len() - 3];
        assert!(matches!(decode(cut), Err(Error::Container(ContainerError::Truncated { .. }))));

        let dup = vec![sample()[0].clone(), sample()[0].clone()];
        assert!(matches!(encode(&dup), Err(Error::Container(ContainerError::DuplicateName(_)))));

        let mut code = encode(&sample()[..1]).unwrap();
        code[HEADER_LEN + 2 + 1] = 9;
        assert!(matches!(decode(&code), Err(Error::Container(ContainerError::BadDtype { code: 9, .. }))));
    }

    #[test]
    fn huge_declared_payload_is_rejected_without_allocating() {
        let mut bytes = encode(&[("x".into(), AnyTensor::U8(Tensor::zeros([1])))]).unwrap();
        let dim_at = HEADER_LEN + 2 + 1 + 2;
        bytes[dim_at..dim_at + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Container(ContainerError::Truncated { .. }))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.mfgt");
        save_container(&p, &sample()).unwrap();
        let back = load_container(&p).unwrap();
        assert_eq!(encode(&back).unwrap(), encode(&sample()).unwrap());
    }
}
