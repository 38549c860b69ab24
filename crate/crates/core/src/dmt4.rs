//! DMT4: the minimal binary tensor container used by every command.
//!
//! Layout (little-endian throughout):
//! ```text
//! offset 0   magic  "DMT4"
//! offset 4   version u8 = 1
//! offset 5   dtype   u8   0 = float32, 1 = complex64 (interleaved re, im), 2 = uint8
//! offset 6   ndim    u8
//! offset 7   reserved u8 = 0
//! offset 8   dims    ndim x u64
//! then       payload, row-major, last axis fastest
//! ```

use crate::error::{Error, Result};
use crate::tensor::{num_elems, Tensor};
use num_complex::Complex;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DMT4";
pub const VERSION: u8 = 1;

/// Element type codes stored in the header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    Complex64 = 1,
    U8 = 2,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::Complex64 => 8,
            Dtype::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::Complex64),
            2 => Ok(Dtype::U8),
            other => Err(Error::Dmt4(format!(
                "unknown dtype code {} at offset 5",
                other
            ))),
        }
    }
}

/// Decoded file contents.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    Complex64(Vec<Complex<f32>>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32,
            Payload::Complex64(_) => Dtype::Complex64,
            Payload::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::Complex64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dims + payload pair ready to write or just read.
#[derive(Clone, Debug, PartialEq)]
pub struct Dmt4 {
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Dmt4 {
    pub fn new(dims: Vec<usize>, payload: Payload) -> Result<Self> {
        if num_elems(&dims) != payload.len() {
            return Err(Error::Dmt4(format!(
                "dims {:?} require {} elements, payload has {}",
                dims,
                num_elems(&dims),
                payload.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Dmt4(format!("ndim {} exceeds 255", dims.len())));
        }
        Ok(Dmt4 { dims, payload })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = self.payload.dtype();
        let mut out =
            Vec::with_capacity(8 + 8 * self.dims.len() + self.payload.len() * dtype.size());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(dtype as u8);
        out.push(self.dims.len() as u8);
        out.push(0);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::Complex64(v) => {
                for c in v {
                    out.extend_from_slice(&c.re.to_le_bytes());
                    out.extend_from_slice(&c.im.to_le_bytes());
                }
            }
            Payload::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Dmt4(format!(
                "header truncated at offset {}: need 8 bytes, have {}",
                bytes.len(),
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Dmt4(format!(
                "bad magic at offset 0: expected \"DMT4\", found {:?}",
                &bytes[0..4]
            )));
        }
        if bytes[4] != VERSION {
            return Err(Error::Dmt4(format!(
                "unsupported version {} at offset 4",
                bytes[4]
            )));
        }
        let dtype = Dtype::from_code(bytes[5])?;
        let ndim = bytes[6] as usize;
        if bytes[7] != 0 {
            return Err(Error::Dmt4(format!(
                "reserved byte at offset 7 must be 0, found {}",
                bytes[7]
            )));
        }
        let dims_end = 8 + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(Error::Dmt4(format!(
                "dims truncated at offset {}: need {} bytes for {} dims",
                bytes.len(),
                dims_end,
                ndim
            )));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut count = 1usize;
        for i in 0..ndim {
            let mut raw = [0u8; 8];
            raw.copy_from_slice(&bytes[8 + 8 * i..16 + 8 * i]);
            let d = u64::from_le_bytes(raw);
            let d = usize::try_from(d).map_err(|_| {
                Error::Dmt4(format!("dim {} at offset {} overflows usize", i, 8 + 8 * i))
            })?;
            count = count.checked_mul(d).ok_or_else(|| {
                Error::Dmt4(format!(
                    "dims product overflows at offset {} (dim {})",
                    8 + 8 * i,
                    i
                ))
            })?;
            dims.push(d);
        }
        let expected = count.checked_mul(dtype.size()).ok_or_else(|| {
            Error::Dmt4(format!("payload size overflows at offset {}", dims_end))
        })?;
        let body = &bytes[dims_end..];
        if body.len() != expected {
            return Err(Error::Dmt4(format!(
                "payload at offset {}: expected {} bytes, found {}",
                dims_end,
                expected,
                body.len()
            )));
        }
        let payload = match dtype {
            Dtype::F32 => Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            Dtype::Complex64 => Payload::Complex64(
                body.chunks_exact(8)
                    .map(|c| {
                        Complex::new(
                            f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                            f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                        )
                    })
                    .collect(),
            ),
            Dtype::U8 => Payload::U8(body.to_vec()),
        };
        Ok(Dmt4 { dims, payload })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Write an f32 tensor.
pub fn write_f32(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    Dmt4::new(t.dims().to_vec(), Payload::F32(t.data().to_vec()))?.write(path)
}

/// Read an f32 tensor, rejecting other dtypes.
pub fn read_f32(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let f = Dmt4::read(&path)?;
    match f.payload {
        Payload::F32(v) => Tensor::from_vec(&f.dims, v),
        other => Err(Error::Dmt4(format!(
            "{}: expected float32, found {:?}",
            path.as_ref().display(),
            other.dtype()
        ))),
    }
}

/// Write a uint8 mask.
pub fn write_u8(path: impl AsRef<Path>, dims: &[usize], data: &[u8]) -> Result<()> {
    Dmt4::new(dims.to_vec(), Payload::U8(data.to_vec()))?.write(path)
}

/// Read a uint8 mask, rejecting other dtypes.
pub fn read_u8(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<u8>)> {
    let f = Dmt4::read(&path)?;
    match f.payload {
        Payload::U8(v) => Ok((f.dims, v)),
        other => Err(Error::Dmt4(format!(
            "{}: expected uint8, found {:?}",
            path.as_ref().display(),
            other.dtype()
        ))),
    }
}

/// Write complex data (stored at single precision on disk).
pub fn write_complex(
    path: impl AsRef<Path>,
    dims: &[usize],
    data: &[Complex<f64>],
) -> Result<()> {
    let v: Vec<Complex<f32>> = data
        .iter()
        .map(|c| Complex::new(c.re as f32, c.im as f32))
        .collect();
    Dmt4::new(dims.to_vec(), Payload::Complex64(v))?.write(path)
}

/// Read complex data back to double precision.
pub fn read_complex(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<Complex<f64>>)> {
    let f = Dmt4::read(&path)?;
    match f.payload {
        Payload::Complex64(v) => Ok((
            f.dims,
            v.iter()
                .map(|c| Complex::new(c.re as f64, c.im as f64))
                .collect(),
        )),
        other => Err(Error::Dmt4(format!(
            "{}: expected complex64, found {:?}",
            path.as_ref().display(),
            other.dtype()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f32_bit_exact() {
        let vals = vec![0.0f32, -1.5, f32::MIN_POSITIVE, 3.25e7, -0.0];
        let file = Dmt4::new(vec![5], Payload::F32(vals.clone())).unwrap();
        let bytes = file.to_bytes();
        let back = Dmt4::from_bytes(&bytes).unwrap();
        assert_eq!(back.dims, vec![5]);
        match &back.payload {
            Payload::F32(v) => {
                for (a, b) in vals.iter().zip(v) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            _ => panic!("wrong dtype"),
        }
        // a second encode is byte-identical
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn roundtrip_complex_and_u8() {
        let c = vec![Complex::new(1.0f32, -2.0), Complex::new(0.5, 0.25)];
        let file = Dmt4::new(vec![2, 1], Payload::Complex64(c.clone())).unwrap();
        let back = Dmt4::from_bytes(&file.to_bytes()).unwrap();
        assert_eq!(back, file);

        let m = vec![0u8, 1, 1, 0, 1, 0];
        let file = Dmt4::new(vec![2, 3], Payload::U8(m.clone())).unwrap();
        let back = Dmt4::from_bytes(&file.to_bytes()).unwrap();
        assert_eq!(back, file);
    }

    #[test]
    fn header_offsets_in_errors() {
        let good = Dmt4::new(vec![2], Payload::U8(vec![1, 0]))
            .unwrap()
            .to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        let err = Dmt4::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("offset 0"), "{}", err);

        let mut bad = good.clone();
        bad[4] = 9;
        let err = Dmt4::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("offset 4"), "{}", err);

        let mut bad = good.clone();
        bad[5] = 7;
        let err = Dmt4::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("offset 5"), "{}", err);

        let mut bad = good.clone();
        bad[7] = 1;
        let err = Dmt4::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("offset 7"), "{}", err);

        let bad = &good[..good.len() - 1];
        let err = Dmt4::from_bytes(bad).unwrap_err().to_string();
        assert!(err.contains("expected 2 bytes, found 1"), "{}", err);
    }

    #[test]
    fn dims_payload_mismatch_rejected() {
        assert!(Dmt4::new(vec![3], Payload::F32(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn huge_dims_do_not_overflow() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&[VERSION, 0, 2, 0]);
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        let err = Dmt4::from_bytes(&bytes).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dmt4");
        let t = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_f32(&path, &t).unwrap();
        let back = read_f32(&path).unwrap();
        assert_eq!(back, t);
        // dtype mismatch on read is a validation error
        assert!(read_u8(&path).unwrap_err().is_validation());
    }
}
