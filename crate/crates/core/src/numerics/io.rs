//! Raw tensor files: `"MMTN"`, u32 version, u8 dtype, u32 rank, u64 extents,
//! then the little-endian row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use super::float::{DType, Float};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"MMTN";
pub const TENSOR_VERSION: u32 = 1;

/// Tensor read from disk in whatever precision it was stored.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to precision `F`, rounding when narrowing.
    pub fn into_precision<F: Float>(self) -> Tensor<F> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor<F: Float>(t: &Tensor<F>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(F::DTYPE.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.numel() * F::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn write_tensor<F: Float>(w: &mut impl Write, t: &Tensor<F>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated tensor ({what})"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_payload<F: Float>(r: &mut impl Read, shape: Vec<usize>) -> Result<Tensor<F>> {
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; numel * F::DTYPE.size()];
    read_exact(r, &mut bytes, "payload")?;
    let data = bytes.chunks_exact(F::DTYPE.size()).map(F::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_stored_tensor(r: &mut impl Read) -> Result<StoredTensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let mut code = [0u8; 1];
    read_exact(r, &mut code, "dtype")?;
    let dtype =
        DType::from_code(code[0]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", code[0])))?;
    let rank = read_u32(r, "rank")? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        read_exact(r, &mut b, "extents")?;
        let d = u64::from_le_bytes(b);
        if d == 0 || d > (1 << 32) {
            return Err(Error::Format(format!("invalid extent {d}")));
        }
        shape.push(d as usize);
    }
    Ok(match dtype {
        DType::F32 => StoredTensor::F32(read_payload(r, shape)?),
        DType::F64 => StoredTensor::F64(read_payload(r, shape)?),
    })
}

/// Reads a tensor that must already be stored in precision `F`.
pub fn read_tensor<F: Float>(r: &mut impl Read) -> Result<Tensor<F>> {
    let stored = read_stored_tensor(r)?;
    if stored.dtype() != F::DTYPE {
        return Err(Error::Format(format!(
            "tensor stored as {:?}, expected {:?}",
            stored.dtype(),
            F::DTYPE
        )));
    }
    Ok(stored.into_precision())
}

pub fn save_tensor<F: Float>(path: &Path, t: &Tensor<F>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<StoredTensor> {
    let bytes = std::fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let t = read_stored_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after tensor", cursor.len())));
    }
    Ok(t)
}
