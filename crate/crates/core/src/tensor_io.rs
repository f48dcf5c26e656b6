//! MIID tensor files: a small header followed by raw little-endian `f32`s.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "MIID"
//! 4       4           version (u32, currently 1)
//! 8       4           rank (u32)
//! 12      4 * rank    dims (u32 each, row-major order)
//! ...     4 * prod    data (f32)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"MIID";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "tensor dims/data mismatch");
        Tensor { dims, data }
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Self {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn from_bools(dims: Vec<usize>, data: &[bool]) -> Self {
        Self::new(dims, data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())
    }

    pub fn from_mat(m: &Mat) -> Self {
        Self::from_f64(vec![m.rows(), m.cols()], m.as_slice())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v != 0.0).collect()
    }

    /// Interprets a rank-2 tensor as a matrix; rank 1 becomes a row vector.
    pub fn to_mat(&self) -> Option<Mat> {
        match self.dims.as_slice() {
            [n] => Some(Mat::from_vec(1, *n, self.to_f64())),
            [r, c] => Some(Mat::from_vec(*r, *c, self.to_f64())),
            _ => None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
        let u32_at = |off: usize| -> std::result::Result<u32, String> {
            bytes
                .get(off..off + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| format!("truncated header at byte {off}"))
        };
        if bytes.get(0..4) != Some(MAGIC.as_slice()) {
            return Err("bad magic".into());
        }
        let version = u32_at(4)?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let rank = u32_at(8)? as usize;
        let dims = (0..rank)
            .map(|k| u32_at(12 + 4 * k).map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let start = 12 + 4 * rank;
        let count: usize = dims.iter().product();
        let body = &bytes[start.min(bytes.len())..];
        if body.len() != 4 * count {
            return Err(format!("expected {} data bytes, found {}", 4 * count, body.len()));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Tensor { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Tensor> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::decode(&bytes).map_err(|message| Error::TensorFormat {
            path: path.to_path_buf(),
            message,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]);
        let bytes = t.encode();
        assert_eq!(&bytes[0..4], b"MIID");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Tensor::decode(b"NOPE").is_err());
        let mut bytes = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).encode();
        bytes.pop();
        assert!(Tensor::decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32) * 0.5 - seed as f32 * 1e-3).collect();
            let t = Tensor::new(dims, data);
            prop_assert_eq!(Tensor::decode(&t.encode()).unwrap(), t);
        }
    }
}
