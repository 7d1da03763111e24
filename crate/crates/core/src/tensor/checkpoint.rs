//! Bit-exact checkpoint serialization.
//!
//! Layout: magic `MTKP`, version u32 LE, tensor count u32 LE, then per tensor:
//! name length u16 LE, UTF-8 name, dtype code u8 (0 = f32, 1 = f64), ndim u8,
//! each dim u32 LE, then the raw values little-endian in row-major order.

use super::{Dtype, Element, Tensor};
use crate::{Error, Result};
use std::io::{Read, Write};

pub const MAGIC: &[u8; 4] = b"MTKP";
pub const VERSION: u32 = 1;

/// A named tensor of either dtype, as stored on disk.
#[derive(Debug, Clone)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }
}

/// Wraps a typed tensor into [`AnyTensor`]; implemented for f32 and f64.
pub trait IntoAny: Element {
    fn wrap(t: Tensor<Self>) -> AnyTensor;
    fn unwrap(a: AnyTensor) -> Option<Tensor<Self>>;
}

impl IntoAny for f32 {
    fn wrap(t: Tensor<f32>) -> AnyTensor {
        AnyTensor::F32(t)
    }
    fn unwrap(a: AnyTensor) -> Option<Tensor<f32>> {
        match a {
            AnyTensor::F32(t) => Some(t),
            AnyTensor::F64(_) => None,
        }
    }
}

impl IntoAny for f64 {
    fn wrap(t: Tensor<f64>) -> AnyTensor {
        AnyTensor::F64(t)
    }
    fn unwrap(a: AnyTensor) -> Option<Tensor<f64>> {
        match a {
            AnyTensor::F64(t) => Some(t),
            AnyTensor::F32(_) => None,
        }
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(String, AnyTensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Format("too many tensors for checkpoint".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[tensor.dtype().code()])?;
        let shape = tensor.shape();
        let ndim = u8::try_from(shape.len())
            .map_err(|_| Error::Format("tensor rank exceeds u8".into()))?;
        w.write_all(&[ndim])?;
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::Format("dim exceeds u32".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        match tensor {
            AnyTensor::F32(t) => {
                for &v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            AnyTensor::F64(t) => {
                for &v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, AnyTensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Format(format!("tensor name not UTF-8: {e}")))?;
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        let dtype = Dtype::from_code(head[0])?;
        let ndim = head[1] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let tensor = match dtype {
            Dtype::F32 => {
                let mut data = vec![0f32; numel];
                let mut buf = [0u8; 4];
                for v in &mut data {
                    r.read_exact(&mut buf)?;
                    *v = f32::from_le_bytes(buf);
                }
                AnyTensor::F32(Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?)
            }
            Dtype::F64 => {
                let mut data = vec![0f64; numel];
                let mut buf = [0u8; 8];
                for v in &mut data {
                    r.read_exact(&mut buf)?;
                    *v = f64::from_le_bytes(buf);
                }
                AnyTensor::F64(Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?)
            }
        };
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn write_checkpoint_file(path: &std::path::Path, entries: &[(String, AnyTensor)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint_file(path: &std::path::Path) -> Result<Vec<(String, AnyTensor)>> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_mixed_dtypes() {
        let entries = vec![
            ("a.w".to_string(), AnyTensor::F32(Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5))),
            ("b.bias".to_string(), AnyTensor::F64(Tensor::from_fn(&[4], |i| -(i as f64)))),
        ];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a.w");
        match (&back[0].1, &back[1].1) {
            (AnyTensor::F32(a), AnyTensor::F64(b)) => {
                assert_eq!(a.shape(), &[2, 3]);
                assert_eq!(a.data()[5], 2.5);
                assert_eq!(b.data()[3], -3.0);
            }
            _ => panic!("dtype mismatch"),
        }
    }

    #[test]
    fn exact_header_bytes() {
        let entries =
            vec![("x".to_string(), AnyTensor::F32(Tensor::new(&[1], vec![1.0f32]).unwrap()))];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        // magic, version 1 LE, count 1 LE, name len 1 LE, 'x', dtype 0, ndim 1,
        // dim 1 LE, then 1.0f32 LE.
        let want: Vec<u8> = [
            b"MTKP".as_slice(),
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &1u16.to_le_bytes(),
            b"x",
            &[0u8, 1u8],
            &1u32.to_le_bytes(),
            &1.0f32.to_le_bytes(),
        ]
        .concat();
        assert_eq!(buf, want);
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[]).unwrap();
        buf[0] = b'X';
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn determinism_same_entries_same_bytes() {
        let entries =
            vec![("p".to_string(), AnyTensor::F64(Tensor::from_fn(&[3, 3], |i| (i as f64).sin())))];
        let mut b1 = Vec::new();
        let mut b2 = Vec::new();
        write_checkpoint(&mut b1, &entries).unwrap();
        write_checkpoint(&mut b2, &entries).unwrap();
        assert_eq!(b1, b2);
    }
}
