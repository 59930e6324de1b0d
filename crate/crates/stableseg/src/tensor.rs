//! Little-endian tensor files.
//!
//! ```text
//! "T2GT" | version u8 = 1 | dtype u8 | rank u8 | pad u8 = 0 | rank x u32 dims | payload
//! ```
//!
//! dtype is 0 for u8, 1 for f32, 2 for f64. The payload is row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"T2GT";
pub const VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("bad magic {0:02x?}, expected \"T2GT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u8),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("nonzero header pad byte {0}")]
    BadPad(u8),
    #[error("truncated {section}: expected {expected} bytes, got {got}")]
    Truncated {
        section: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0} unexpected bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid dims {0:?}")]
    BadDims(Vec<usize>),
    #[error("expected {expected} tensor, found {found}")]
    WrongDtype {
        expected: &'static str,
        found: &'static str,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8,
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::U8 => 0,
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, TensorError> {
        match code {
            0 => Ok(Dtype::U8),
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            c => Err(TensorError::BadDtype(c)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::U8(_) => Dtype::U8,
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

fn element_count(dims: &[usize]) -> Option<usize> {
    if dims.is_empty() || dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
        return None;
    }
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        match element_count(&dims) {
            Some(n) if n == data.len() => Ok(Self { dims, data }),
            _ => Err(TensorError::BadDims(dims)),
        }
    }

    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::U8(data))
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F64(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    /// Values widened to f64; u8 values keep their integer value.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn into_u8(self) -> Result<Vec<u8>, TensorError> {
        match self.data {
            TensorData::U8(v) => Ok(v),
            other => Err(TensorError::WrongDtype {
                expected: "u8",
                found: other.dtype().name(),
            }),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TensorError> {
        w.write_all(&MAGIC)?;
        w.write_all(&[VERSION, self.dtype().code(), self.dims.len() as u8, 0])?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match &self.data {
            TensorData::U8(v) => w.write_all(v)?,
            TensorData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + self.data.len() * self.dtype().size());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads one tensor and requires the stream to end after it.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self, TensorError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let take = |at: usize, n: usize, section: &'static str| {
            bytes.get(at..at + n).ok_or(TensorError::Truncated {
                section,
                expected: n,
                got: bytes.len().saturating_sub(at),
            })
        };
        let head = take(0, 8, "header")?;
        let magic = [head[0], head[1], head[2], head[3]];
        if magic != MAGIC {
            return Err(TensorError::BadMagic(magic));
        }
        if head[4] != VERSION {
            return Err(TensorError::BadVersion(head[4]));
        }
        let dtype = Dtype::from_code(head[5])?;
        let rank = head[6] as usize;
        if head[7] != 0 {
            return Err(TensorError::BadPad(head[7]));
        }
        let dims: Vec<usize> = take(8, 4 * rank, "dims")?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let count = element_count(&dims).ok_or_else(|| TensorError::BadDims(dims.clone()))?;
        let start = 8 + 4 * rank;
        let size = count.checked_mul(dtype.size()).ok_or_else(|| TensorError::BadDims(dims.clone()))?;
        let payload = take(start, size, "payload")?;
        if bytes.len() > start + size {
            return Err(TensorError::TrailingBytes(bytes.len() - start - size));
        }
        let data = match dtype {
            Dtype::U8 => TensorData::U8(payload.to_vec()),
            Dtype::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
        };
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TensorError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
