//! `DVGTTEN1` binary tensor files: 8-byte magic, u8 dtype code (0 = f32,
//! 1 = f64), u8 rank, `rank` little-endian u64 extents, then the row-major
//! little-endian payload.

use std::io::{Read, Write};

use crate::array::Tensor;
use crate::error::{Result, TensorError};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"DVGTTEN1";

pub fn encode<F: Scalar>(t: &Tensor<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + F::DTYPE.size() * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(F::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

pub fn write_tensor<F: Scalar, W: Write>(mut w: W, t: &Tensor<F>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(TensorError::Format(format!("rank {} too large", t.rank())));
    }
    w.write_all(&encode(t))?;
    Ok(())
}

/// Reads the header, returning dtype and shape.
fn read_header<R: Read>(r: &mut R) -> Result<(DType, Vec<usize>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head).map_err(truncated)?;
    let dtype =
        DType::from_code(head[0]).ok_or_else(|| TensorError::Format(format!("unknown dtype code {}", head[0])))?;
    let mut shape = Vec::with_capacity(head[1] as usize);
    for _ in 0..head[1] {
        let mut d = [0u8; 8];
        r.read_exact(&mut d).map_err(truncated)?;
        shape.push(u64::from_le_bytes(d) as usize);
    }
    Ok((dtype, shape))
}

fn truncated(e: std::io::Error) -> TensorError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        TensorError::Format("truncated file".into())
    } else {
        TensorError::Io(e)
    }
}

/// Reads a tensor stored with element type `F`; a dtype mismatch is an error.
pub fn read_tensor<F: Scalar, R: Read>(mut r: R) -> Result<Tensor<F>> {
    let (dtype, shape) = read_header(&mut r)?;
    if dtype != F::DTYPE {
        return Err(TensorError::Format(format!("stored dtype {dtype:?}, expected {:?}", F::DTYPE)));
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * dtype.size()];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(TensorError::Format("trailing bytes after payload".into()));
    }
    let data = bytes.chunks_exact(dtype.size()).map(F::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode<F: Scalar>(bytes: &[u8]) -> Result<Tensor<F>> {
    read_tensor(bytes)
}

/// Element type recorded in a tensor file header.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    let mut r = bytes;
    Ok(read_header(&mut r)?.0)
}
