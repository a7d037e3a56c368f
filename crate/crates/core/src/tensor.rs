//! The shared tensor file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FDWM"            4 bytes magic
//! version           u16 (currently 1)
//! rank              u8
//! dims              rank × u32
//! payload           prod(dims) × f32, row-major
//! ```
//!
//! Complex data is stored with a trailing dimension of 2 holding interleaved `re, im`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FDWM";
pub const VERSION: u16 = 1;

/// A dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::arg(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::arg("tensor rank exceeds 255"));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::arg("tensor dimension exceeds u32"));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&[self.dims.len() as u8])?;
        for &d in &self.dims {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut buf2 = [0u8; 2];
        input.read_exact(&mut buf2).map_err(truncated)?;
        let version = u16::from_le_bytes(buf2);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported tensor version {version}")));
        }
        let mut rank = [0u8; 1];
        input.read_exact(&mut rank).map_err(truncated)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut b = [0u8; 4];
            input.read_exact(&mut b).map_err(truncated)?;
            dims.push(u32::from_le_bytes(b) as usize);
        }
        let count: usize = dims.iter().product();
        let mut payload = vec![0u8; count * 4];
        input.read_exact(&mut payload).map_err(truncated)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        // Writing into a Vec cannot fail.
        self.write_to(&mut out).expect("in-memory write");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let t = Tensor::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after tensor", cursor.len())));
        }
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Tensor::from_bytes(&fs::read(path)?)
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated tensor".into())
    } else {
        Error::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"FDWM");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..11], &[2, 0, 0, 0]);
        assert_eq!(&bytes[11..15], &[1, 0, 0, 0]);
        assert_eq!(&bytes[15..19], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[19..23], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 23);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Tensor::from_bytes(b"NOPE"), Err(Error::Format(_))));
        let mut bytes = Tensor::new(vec![3], vec![0.0; 3]).unwrap().to_bytes();
        bytes.pop();
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn dims_must_match_payload() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn round_trips_bit_exactly(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back.dims, t.dims);
            prop_assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
