//! OVT: the minimal binary tensor interchange format.
//!
//! Layout (little-endian):
//! - magic: `b"OVTF"`
//! - version: u32 (currently 1)
//! - dtype: u8 (0 = f32, 1 = i32)
//! - ndim: u32
//! - dims: ndim * u64
//! - payload: product(dims) elements, row-major

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OVTF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    fn dtype_tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::I32(_) => 1,
        }
    }
}

/// A dense row-major tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn i32(dims: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(dims, TensorData::I32(data))
    }

    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "tensor dims {dims:?} hold {numel} elements but payload has {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::I32(_) => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    pub fn into_f32(self) -> Option<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Some(v),
            TensorData::I32(_) => None,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.data.dtype_tag()])?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::I32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        w.flush()
    }

    /// Decodes a tensor; `origin` only labels error messages.
    pub fn read_from(mut r: impl Read, origin: &Path) -> Result<Self> {
        let fmt_err = |message: String| Error::Format { path: origin.to_path_buf(), message };
        let io_err = |e: std::io::Error| fmt_err(format!("truncated tensor: {e}"));

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(fmt_err(format!("bad magic {magic:?}, expected \"OVTF\"")));
        }
        let mut u32_buf = [0u8; 4];
        r.read_exact(&mut u32_buf).map_err(io_err)?;
        let version = u32::from_le_bytes(u32_buf);
        if version != VERSION {
            return Err(fmt_err(format!("unsupported OVT version {version}, expected {VERSION}")));
        }
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype).map_err(io_err)?;
        r.read_exact(&mut u32_buf).map_err(io_err)?;
        let ndim = u32::from_le_bytes(u32_buf) as usize;
        if ndim > 32 {
            return Err(fmt_err(format!("implausible ndim {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut u64_buf = [0u8; 8];
        for _ in 0..ndim {
            r.read_exact(&mut u64_buf).map_err(io_err)?;
            dims.push(u64::from_le_bytes(u64_buf) as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fmt_err(format!("dims {dims:?} overflow")))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(io_err)?;
        if bytes.len() != numel * 4 {
            return Err(fmt_err(format!(
                "payload is {} bytes, dims {dims:?} need {}",
                bytes.len(),
                numel * 4
            )));
        }
        let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        let data = match dtype[0] {
            0 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
            1 => TensorData::I32(words.map(i32::from_le_bytes).collect()),
            other => return Err(fmt_err(format!("unknown dtype tag {other}"))),
        };
        Ok(Tensor { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), path)
    }
}
