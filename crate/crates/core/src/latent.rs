//! Latent videos and their on-disk tensor format.
//!
//! File layout: 12-byte magic `ARDIFF-LATNT`, `u32` version (little-endian),
//! `u32` header length, a JSON header, then `F*L*D` little-endian `f32`s.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const LATENT_MAGIC: &[u8; 12] = b"ARDIFF-LATNT";
pub const LATENT_VERSION: u32 = 1;

/// `F x L x D` real tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    frames: usize,
    tokens: usize,
    dim: usize,
    data: Vec<f64>,
}

impl LatentVideo {
    pub fn new(frames: usize, tokens: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || tokens == 0 || dim == 0 {
            return Err(invalid("latent dimensions must be positive"));
        }
        let expected = frames * tokens * dim;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("latent contains non-finite values"));
        }
        Ok(Self {
            frames,
            tokens,
            dim,
            data,
        })
    }

    pub fn zeros(frames: usize, tokens: usize, dim: usize) -> Self {
        Self {
            frames,
            tokens,
            dim,
            data: vec![0.0; frames * tokens * dim],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.tokens, self.dim)
    }

    pub fn frame_len(&self) -> usize {
        self.tokens * self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Frame `i`, zero-based.
    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.frame_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..*self
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W, scale_factor: f64) -> Result<()> {
        let header = LatentHeader {
            shape: [self.frames, self.tokens, self.dim],
            dtype: "float32".into(),
            byte_order: "little".into(),
            scale_factor,
        };
        write_preamble(&mut out, LATENT_MAGIC, LATENT_VERSION, &serde_json::to_vec(&header)?)?;
        let mut body = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            body.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.write_all(&body)?;
        Ok(())
    }

    /// Reads a tensor file, returning the latent and its recorded scale factor.
    pub fn read_from<R: Read>(mut input: R) -> Result<(Self, f64)> {
        let header_bytes = read_preamble(&mut input, LATENT_MAGIC, LATENT_VERSION)?;
        let header: LatentHeader = serde_json::from_slice(&header_bytes)?;
        if header.dtype != "float32" || header.byte_order != "little" {
            return Err(Error::Format(format!(
                "unsupported tensor encoding {}/{}",
                header.dtype, header.byte_order
            )));
        }
        let [f, l, d] = header.shape;
        let data = read_f32s(&mut input, f * l * d)?;
        Ok((Self::new(f, l, d, data)?, header.scale_factor))
    }

    /// `frame,token,dim,value` rows with a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "frame,token,dim,value")?;
        for f in 0..self.frames {
            for l in 0..self.tokens {
                for d in 0..self.dim {
                    let v = self.data[(f * self.tokens + l) * self.dim + d];
                    writeln!(out, "{f},{l},{d},{v}")?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LatentHeader {
    shape: [usize; 3],
    dtype: String,
    byte_order: String,
    scale_factor: f64,
}

pub(crate) fn write_preamble<W: Write>(
    out: &mut W,
    magic: &[u8; 12],
    version: u32,
    header: &[u8],
) -> Result<()> {
    out.write_all(magic)?;
    out.write_all(&version.to_le_bytes())?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(header)?;
    Ok(())
}

pub(crate) fn read_preamble<R: Read>(input: &mut R, magic: &[u8; 12], version: u32) -> Result<Vec<u8>> {
    let mut head = [0u8; 16];
    input.read_exact(&mut head)?;
    if &head[..12] != magic {
        return Err(Error::Format("bad magic".into()));
    }
    let found = u32::from_le_bytes(head[12..16].try_into().unwrap());
    if found != version {
        return Err(Error::Format(format!("unsupported version {found}, expected {version}")));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    Ok(header)
}

pub(crate) fn read_f32s<R: Read>(input: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut raw = vec![0u8; count * 4];
    input.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(LatentVideo::new(2, 1, 2, vec![0.0; 3]).is_err());
        assert!(LatentVideo::new(0, 1, 2, vec![]).is_err());
        assert!(LatentVideo::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let v = LatentVideo::new(2, 1, 2, vec![0.5, -1.25, 3.0, 0.0]).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf, 0.5).unwrap();
        assert_eq!(&buf[..12], LATENT_MAGIC);
        let (back, scale) = LatentVideo::read_from(&buf[..]).unwrap();
        assert_eq!(back, v);
        assert_eq!(scale, 0.5);
        buf[0] = b'X';
        assert!(LatentVideo::read_from(&buf[..]).is_err());
    }

    #[test]
    fn csv_dump() {
        let v = LatentVideo::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        v.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "frame,token,dim,value\n0,0,0,1\n0,0,1,2\n");
    }
}
