//! Portable little-endian tensor container (`.rvtf`).
//!
//! Single tensor:
//!
//! ```text
//! "RVTF" | version u16 | dtype u8 (1 = f32le) | rank u8 | dims u32 x rank | payload
//! ```
//!
//! Named set (checkpoints, ensembles with metadata):
//!
//! ```text
//! "RVTF" | version u16 | b'D' | count u32 | meta_len u32 | meta (key=value lines)
//!   then per entry: name_len u16 | name | dtype u8 | rank u8 | dims | payload
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"RVTF";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;
const DIRECTORY: u8 = b'D';
/// Bytes before the payload of a single-tensor file of the given rank.
pub fn header_len(rank: usize) -> usize {
    4 + 2 + 1 + 1 + 4 * rank
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TensorFileError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("unsupported dtype tag {0}")]
    BadDtype(u8),
    #[error("truncated: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("dimensions {0:?} overflow or contain a zero axis")]
    DimOverflow(Vec<u32>),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("name or metadata is not utf-8")]
    BadText,
    #[error("expected a single tensor, found a named set")]
    NotSingle,
}

impl TensorFileError {
    /// Stable short code for scripts and logs.
    pub fn code(&self) -> &'static str {
        match self {
            Self::BadMagic(_) => "bad_magic",
            Self::BadVersion(_) => "bad_version",
            Self::BadDtype(_) => "bad_dtype",
            Self::Truncated { .. } => "truncated",
            Self::DimOverflow(_) => "dim_overflow",
            Self::TrailingBytes(_) => "trailing_bytes",
            Self::BadText => "bad_text",
            Self::NotSingle => "not_single",
        }
    }
}

/// Named tensors plus free-form string metadata, both kept sorted by key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorSet {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl TensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::invalid(format!("metadata key `{key}` missing")))
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(4 * t.numel());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(t.rank()) + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_tensor(&mut out, t);
    out
}

pub fn encode_set(set: &TensorSet) -> Vec<u8> {
    let mut meta = String::new();
    for (k, v) in &set.meta {
        meta.push_str(k);
        meta.push('=');
        meta.push_str(v);
        meta.push('\n');
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DIRECTORY);
    out.extend_from_slice(&(set.tensors.len() as u32).to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for (name, t) in &set.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_tensor(&mut out, t);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

type FileResult<T> = std::result::Result<T, TensorFileError>;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> FileResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(TensorFileError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.buf.len(),
            });
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> FileResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> FileResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> FileResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn text(&mut self, n: usize) -> FileResult<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TensorFileError::BadText)
    }

    /// Magic and version; returns the following tag byte.
    fn header(&mut self) -> FileResult<u8> {
        let magic: [u8; 4] = match self.buf.get(..4) {
            Some(m) => m.try_into().unwrap(),
            None => {
                return Err(TensorFileError::Truncated {
                    offset: 0,
                    needed: 4,
                    len: self.buf.len(),
                })
            }
        };
        if &magic != MAGIC {
            return Err(TensorFileError::BadMagic(magic));
        }
        self.pos = 4;
        let version = self.u16()?;
        if version != VERSION {
            return Err(TensorFileError::BadVersion(version));
        }
        self.u8()
    }

    /// Rank, dims and payload; the dtype byte has already been consumed.
    fn tensor_body(&mut self, dtype: u8) -> FileResult<Tensor<f32>> {
        if dtype != DTYPE_F32 {
            return Err(TensorFileError::BadDtype(dtype));
        }
        let rank = self.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| if d == 0 { None } else { acc.checked_mul(d as usize) })
            .and_then(|c| c.checked_mul(4).map(|_| c));
        let Some(count) = count else {
            return Err(TensorFileError::DimOverflow(dims));
        };
        let bytes = self.take(count * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        debug_assert_eq!(numel(&shape), count);
        Ok(Tensor::new(shape, data).expect("validated dims"))
    }

    fn finish(&self) -> FileResult<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(TensorFileError::TrailingBytes(n)),
        }
    }
}

/// Decode either layout into a set; a single tensor is stored under `""`.
pub fn decode(bytes: &[u8]) -> FileResult<TensorSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let tag = r.header()?;
    let mut set = TensorSet::new();
    if tag != DIRECTORY {
        let t = r.tensor_body(tag)?;
        r.finish()?;
        set.tensors.insert(String::new(), t);
        return Ok(set);
    }
    let count = r.u32()? as usize;
    let meta_len = r.u32()? as usize;
    let meta = r.text(meta_len)?;
    for line in meta.lines() {
        let (k, v) = line.split_once('=').ok_or(TensorFileError::BadText)?;
        set.meta.insert(k.to_string(), v.to_string());
    }
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.text(name_len)?;
        let dtype = r.u8()?;
        let t = r.tensor_body(dtype)?;
        set.tensors.insert(name, t);
    }
    r.finish()?;
    Ok(set)
}

pub fn decode_tensor(bytes: &[u8]) -> FileResult<Tensor<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let tag = r.header()?;
    if tag == DIRECTORY {
        return Err(TensorFileError::NotSingle);
    }
    let t = r.tensor_body(tag)?;
    r.finish()?;
    Ok(t)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(Error::io(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(Error::io(path))
}

fn wrap(path: &Path) -> impl FnOnce(TensorFileError) -> Error + '_ {
    move |source| Error::TensorFile {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_tensor_file(path: &Path) -> Result<TensorSet> {
    decode(&read_bytes(path)?).map_err(wrap(path))
}

pub fn write_tensor_file(path: &Path, set: &TensorSet) -> Result<()> {
    write_bytes(path, &encode_set(set))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    decode_tensor(&read_bytes(path)?).map_err(wrap(path))
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_bytes(path, &encode_tensor(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_three_payload_is_24_bytes() {
        let t = Tensor::<f32>::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(bytes.len() - header_len(2), 24);
        assert_eq!(&bytes[..4], b"RVTF");
        assert_eq!(decode_tensor(&bytes).unwrap(), t);
    }

    #[test]
    fn golden_bytes() {
        let t = Tensor::<f32>::new([1, 2], vec![1.0, -2.0]).unwrap();
        let expected: Vec<u8> = vec![
            b'R', b'V', b'T', b'F', 1, 0, 1, 2, 1, 0, 0, 0, 2, 0, 0, 0, 0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0,
        ];
        assert_eq!(encode_tensor(&t), expected);
    }

    #[test]
    fn distinct_error_codes() {
        let t = Tensor::<f32>::zeros([2, 2]);
        let good = encode_tensor(&t);

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert_eq!(decode(&bad).unwrap_err().code(), "bad_magic");

        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(decode(&bad).unwrap_err().code(), "bad_version");

        assert_eq!(decode(&good[..good.len() - 1]).unwrap_err().code(), "truncated");
        assert_eq!(decode(&good[..2]).unwrap_err().code(), "truncated");

        let mut bad = good.clone();
        bad[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        bad[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert_eq!(decode(&bad).unwrap_err().code(), "dim_overflow");

        let mut bad = good.clone();
        bad[6] = 7;
        assert_eq!(decode(&bad).unwrap_err().code(), "bad_dtype");

        let mut bad = good;
        bad.push(0);
        assert_eq!(decode(&bad).unwrap_err().code(), "trailing_bytes");
    }

    #[test]
    fn set_round_trip_with_meta() {
        let mut set = TensorSet::new();
        set.insert("a.w", Tensor::<f32>::new([3], vec![0.1, f32::MIN_POSITIVE, -0.0]).unwrap());
        set.insert("b", Tensor::<f32>::scalar(7.0));
        set.set_meta("profile", "desk");
        set.set_meta("steps", 12);
        let back = decode(&encode_set(&set)).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.get("b").unwrap().shape(), &[] as &[usize]);
        assert!(matches!(decode_tensor(&encode_set(&set)), Err(TensorFileError::NotSingle)));
    }

    #[test]
    fn file_errors_carry_path() {
        let dir = std::env::temp_dir().join(format!("rvtf-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.rvtf");
        std::fs::write(&p, b"XXXX\x01\x00").unwrap();
        let err = read_tensor_file(&p).unwrap_err();
        assert!(err.to_string().contains("bad.rvtf"), "{err}");
        assert!(matches!(err, Error::TensorFile { source: TensorFileError::BadMagic(_), .. }));
        std::fs::remove_dir_all(&dir).ok();
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in prop::collection::vec(1usize..5, 0..4),
            seed in prop::collection::vec(any::<u32>(), 64),
        ) {
            let n = numel(&dims);
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed[i % 64].wrapping_mul(i as u32 + 1))).collect();
            let t = Tensor::<f32>::new(dims.clone(), data.clone()).unwrap();
            let back = decode_tensor(&encode_tensor(&t)).unwrap();
            let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.shape(), &dims[..]);
        }
    }
}
