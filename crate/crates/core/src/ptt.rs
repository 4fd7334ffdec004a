//! `PTT1` raw tensor files.
//!
//! ```text
//! "PTT1" | u32 rank | rank × u32 dims | f32 payload, row-major
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

pub const MAGIC: [u8; 4] = *b"PTT1";

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::param(
                "data",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_latent(z: &LatentTensor) -> Self {
        Self {
            shape: z.shape().to_vec(),
            data: z.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_latent(&self) -> Result<LatentTensor> {
        let &[c, h, w] = self.shape.as_slice() else {
            return Err(Error::Data(format!(
                "expected a rank-3 tensor, got shape {:?}",
                self.shape
            )));
        };
        Ok(
            Array3::from_shape_vec((c, h, w), self.data.iter().map(|&v| v as f64).collect())
                .expect("length checked at construction"),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let take_u32 = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| Error::Data("truncated PTT1 header".into()))
        };
        if bytes.get(..4) != Some(&MAGIC[..]) {
            return Err(Error::Data("missing PTT1 magic".into()));
        }
        let rank = take_u32(4)? as usize;
        let shape = (0..rank)
            .map(|i| take_u32(8 + 4 * i).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let start = 8 + 4 * rank;
        let n: usize = shape.iter().product();
        let payload = &bytes[start..];
        if payload.len() != 4 * n {
            return Err(Error::Data(format!(
                "PTT1 payload holds {} bytes, shape {shape:?} needs {}",
                payload.len(),
                4 * n
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}
