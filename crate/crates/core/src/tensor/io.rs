//! Raw tensor serialization.
//!
//! Layout: magic `BANT`, u32 version (1), u32 rank (4), four u32 extents,
//! then `n*c*h*w` IEEE-754 binary32 values. All integers and floats are
//! little-endian.

use std::io::{Read, Write};

use super::{Scalar, Shape, Tensor, TensorError};

pub const TENSOR_MAGIC: &[u8; 4] = b"BANT";
pub const TENSOR_VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Io(e.to_string())
}

pub fn write_tensor<T: Scalar, W: Write>(out: &mut W, t: &Tensor<T>) -> Result<(), TensorError> {
    let mut buf = Vec::with_capacity(24 + 4 * t.numel());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    buf.extend_from_slice(&4u32.to_le_bytes());
    for e in t.shape().0 {
        let e = u32::try_from(e).map_err(|_| TensorError::Format(format!("extent {e} exceeds u32")))?;
        buf.extend_from_slice(&e.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf).map_err(io_err)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != TENSOR_MAGIC {
        return Err(TensorError::Format(format!("bad tensor magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != TENSOR_VERSION {
        return Err(TensorError::Format(format!("unsupported tensor version {version}")));
    }
    let rank = read_u32(r)?;
    if rank != 4 {
        return Err(TensorError::Format(format!("unsupported rank {rank}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(r)? as usize;
    }
    let shape = Shape(dims);
    let mut raw = vec![0u8; 4 * shape.numel()];
    r.read_exact(&mut raw).map_err(io_err)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::from_vec(shape, data)
}
