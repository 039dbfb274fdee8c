//! The `LORCK1` binary tensor format.
//!
//! Layout: 6-byte magic `LORCK1`, 1 byte dtype code (0 = f32, 1 = f64,
//! 2 = u8), 1 byte rank, rank x 8-byte little-endian unsigned extents, then
//! the raw little-endian row-major payload. Used for datasets, checkpoints
//! and exported kernels.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 6] = b"LORCK1";
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_F64: u8 = 1;
pub const DTYPE_U8: u8 = 2;

fn header(dtype: u8, shape: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * shape.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype);
    out.push(shape.len() as u8);
    for &ext in shape {
        out.extend_from_slice(&(ext as u64).to_le_bytes());
    }
    out
}

fn parse_header(bytes: &[u8]) -> Result<(u8, Vec<usize>, usize)> {
    if bytes.len() < 8 || &bytes[..6] != MAGIC {
        return Err(Error::Format("bad magic; not a LORCK1 tensor".into()));
    }
    let dtype = bytes[6];
    let rank = bytes[7] as usize;
    let body = 8 + 8 * rank;
    if bytes.len() < body {
        return Err(Error::Format("truncated extent table".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut ext = [0u8; 8];
        ext.copy_from_slice(&bytes[8 + 8 * i..16 + 8 * i]);
        shape.push(u64::from_le_bytes(ext) as usize);
    }
    Ok((dtype, shape, body))
}

/// Serialize a float tensor to LORCK1 bytes.
pub fn encode<E: Element>(t: &Tensor<E>) -> Vec<u8> {
    let mut out = header(E::DTYPE, t.shape());
    for &v in t.data() {
        match E::DTYPE {
            DTYPE_F32 => out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
            _ => out.extend_from_slice(&v.to_f64().to_le_bytes()),
        }
    }
    out
}

/// Serialize a u8 tensor (masks, class labels) to LORCK1 bytes.
pub fn encode_u8(shape: &[usize], data: &[u8]) -> Vec<u8> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut out = header(DTYPE_U8, shape);
    out.extend_from_slice(data);
    out
}

/// Deserialize a float tensor; the stored dtype must match `E` exactly.
pub fn decode<E: Element>(bytes: &[u8]) -> Result<Tensor<E>> {
    let (dtype, shape, body) = parse_header(bytes)?;
    if dtype != E::DTYPE {
        return Err(Error::Format(format!(
            "dtype code {} does not match the requested element type ({})",
            dtype,
            E::DTYPE
        )));
    }
    let n: usize = shape.iter().product();
    let width = if dtype == DTYPE_F32 { 4 } else { 8 };
    if bytes.len() != body + n * width {
        return Err(Error::Format(format!(
            "payload length {} does not match shape {:?}",
            bytes.len() - body,
            shape
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let at = body + i * width;
        let v = if dtype == DTYPE_F32 {
            f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64
        } else {
            f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
        };
        data.push(E::from_f64(v));
    }
    Tensor::from_vec(shape, data)
}

pub fn decode_u8(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    let (dtype, shape, body) = parse_header(bytes)?;
    if dtype != DTYPE_U8 {
        return Err(Error::Format(format!("expected u8 tensor, dtype code {}", dtype)));
    }
    let n: usize = shape.iter().product();
    if bytes.len() != body + n {
        return Err(Error::Format("u8 payload length mismatch".into()));
    }
    Ok((shape, bytes[body..].to_vec()))
}

pub fn write_tensor<E: Element>(path: impl AsRef<Path>, t: &Tensor<E>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read_tensor<E: Element>(path: impl AsRef<Path>) -> Result<Tensor<E>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn write_u8(path: impl AsRef<Path>, shape: &[usize], data: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_u8(shape, data))?;
    Ok(())
}

pub fn read_u8(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_u8(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_roundtrip_is_bit_exact() {
        let t = Tensor::<f32>::from_vec(vec![2, 3], vec![0.1, -2.5, 3.75, 1e-20, 7.0, -0.0]).unwrap();
        let back: Tensor<f32> = decode(&encode(&t)).unwrap();
        assert!(t.bit_eq(&back));
    }

    #[test]
    fn u8_roundtrip() {
        let bytes = encode_u8(&[2, 2], &[0, 1, 1, 0]);
        let (shape, data) = decode_u8(&bytes).unwrap();
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(data, vec![0, 1, 1, 0]);
    }

    #[test]
    fn header_layout_is_stable() {
        let t = Tensor::<f32>::zeros(vec![3, 4]);
        let bytes = encode(&t);
        assert_eq!(&bytes[..6], b"LORCK1");
        assert_eq!(bytes[6], 0); // f32
        assert_eq!(bytes[7], 2); // rank
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 4);
        assert_eq!(bytes.len(), 24 + 12 * 4);
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let t = Tensor::<f32>::zeros(vec![2]);
        assert!(decode::<f64>(&encode(&t)).is_err());
    }
}
