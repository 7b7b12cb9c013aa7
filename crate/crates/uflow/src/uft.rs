//! The UFT tensor file format.
//!
//! Layout: magic `UFT1`, one dtype byte (0 = f64, 1 = f32, 2 = complex128
//! stored as interleaved f64 pairs), one rank byte, `rank` little-endian
//! u64 dimensions, then the row-major payload in little-endian order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64 as C64;
use uflow_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UFT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
    C128 = 2,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            2 => Ok(DType::C128),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::C128 => 16,
        }
    }
}

/// A decoded UFT payload.
#[derive(Debug, Clone, PartialEq)]
pub enum UftData {
    Real { shape: Vec<usize>, data: Vec<f64>, dtype: DType },
    Complex { shape: Vec<usize>, data: Vec<C64> },
}

fn write_header<W: Write>(w: &mut W, dtype: DType, shape: &[usize]) -> Result<()> {
    let rank = u8::try_from(shape.len()).map_err(|_| Error::Format(format!("rank {} exceeds 255", shape.len())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[dtype as u8, rank])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

/// Write a real tensor as f64 (or rounded to f32).
pub fn write_real<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    write_header(w, dtype, t.shape())?;
    match dtype {
        DType::F64 => t.data().iter().try_for_each(|v| w.write_all(&v.to_le_bytes()))?,
        DType::F32 => t.data().iter().try_for_each(|v| w.write_all(&(*v as f32).to_le_bytes()))?,
        DType::C128 => return Err(Error::Format("a real tensor cannot be written as complex".into())),
    }
    Ok(())
}

pub fn write_complex<W: Write>(w: &mut W, shape: &[usize], data: &[C64]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::Format(format!("shape {shape:?} does not hold {} values", data.len())));
    }
    write_header(w, DType::C128, shape)?;
    for z in data {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read<R: Read>(r: &mut R) -> Result<UftData> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let dtype = DType::from_code(head[0])?;
    let mut shape = Vec::with_capacity(head[1] as usize);
    for _ in 0..head[1] {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("dimension overflows".into()))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * dtype.size() {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            bytes.len(),
            count * dtype.size()
        )));
    }
    Ok(match dtype {
        DType::F64 => UftData::Real {
            data: bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            shape,
            dtype,
        },
        DType::F32 => UftData::Real {
            data: bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            shape,
            dtype,
        },
        DType::C128 => UftData::Complex {
            data: bytes
                .chunks_exact(16)
                .map(|c| {
                    C64::new(
                        f64::from_le_bytes(c[..8].try_into().unwrap()),
                        f64::from_le_bytes(c[8..].try_into().unwrap()),
                    )
                })
                .collect(),
            shape,
        },
    })
}

/// Read a real tensor (f64 or f32 on disk).
pub fn read_real<R: Read>(r: &mut R) -> Result<Tensor> {
    match read(r)? {
        UftData::Real { shape, data, .. } => Ok(Tensor::new(&shape, data)?),
        UftData::Complex { .. } => Err(Error::Format("expected a real tensor, found complex".into())),
    }
}

pub fn read_complex<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<C64>)> {
    match read(r)? {
        UftData::Complex { shape, data } => Ok((shape, data)),
        UftData::Real { .. } => Err(Error::Format("expected a complex tensor, found real".into())),
    }
}

pub fn save_real(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write_real(&mut w, t, DType::F64)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_real(path: &Path) -> Result<Tensor> {
    read_real(&mut BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

pub fn save_complex(path: &Path, shape: &[usize], data: &[C64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write_complex(&mut w, shape, data)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_complex(path: &Path) -> Result<(Vec<usize>, Vec<C64>)> {
    read_complex(&mut BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut buf = Vec::new();
        write_real(&mut buf, &t, DType::F64).unwrap();
        assert_eq!(&buf[..4], b"UFT1");
        assert_eq!(buf[4], 0);
        assert_eq!(buf[5], 2);
        assert_eq!(u64::from_le_bytes(buf[6..14].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[14..22].try_into().unwrap()), 3);
        assert_eq!(buf.len(), 4 + 2 + 16 + 48);
        assert_eq!(f64::from_le_bytes(buf[22..30].try_into().unwrap()), 1.0);
    }

    #[test]
    fn complex_is_interleaved() {
        let mut buf = Vec::new();
        write_complex(&mut buf, &[1], &[C64::new(1.5, -2.5)]).unwrap();
        assert_eq!(buf[4], 2);
        assert_eq!(f64::from_le_bytes(buf[14..22].try_into().unwrap()), 1.5);
        assert_eq!(f64::from_le_bytes(buf[22..30].try_into().unwrap()), -2.5);
        assert_eq!(read_complex(&mut buf.as_slice()).unwrap(), (vec![1], vec![C64::new(1.5, -2.5)]));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(read(&mut &b"UFT2\0\0"[..]).is_err());
        let t = Tensor::zeros(&[4]);
        let mut buf = Vec::new();
        write_real(&mut buf, &t, DType::F32).unwrap();
        buf.pop();
        assert!(read(&mut buf.as_slice()).is_err());
        buf.clear();
        write_real(&mut buf, &t, DType::F64).unwrap();
        assert!(read_complex(&mut buf.as_slice()).is_err());
    }
}
