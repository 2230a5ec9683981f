//! Dense optical flow fields in the reverse-flow convention.
//!
//! Channel 0 holds the horizontal displacement `u`, channel 1 the vertical
//! displacement `v`, both in pixels. Position `(x, y)` in frame `t` corresponds
//! to `(x + u, y + v)` in frame `t - 1`. Every producer in this crate (the
//! synthetic generator, block matching, the flow CNN) follows this convention.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Magic number at the start of a Middlebury `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    tensor: Tensor<T>,
}

impl<T: Real> FlowField<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.shape().c != 2 {
            return Err(dim_err!("flow field needs 2 channels, got {}", tensor.shape()));
        }
        if !tensor.is_finite() {
            return Err(Error::Validation("flow field contains non-finite values".into()));
        }
        Ok(FlowField { tensor })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        FlowField { tensor: Tensor::zeros(Shape::new(n, 2, h, w)) }
    }

    pub fn uniform(n: usize, h: usize, w: usize, u: T, v: T) -> Self {
        let mut tensor = Tensor::zeros(Shape::new(n, 2, h, w));
        let p = h * w;
        for (i, chunk) in tensor.data_mut().chunks_mut(p).enumerate() {
            chunk.fill(if i % 2 == 0 { u } else { v });
        }
        FlowField { tensor }
    }

    pub fn shape(&self) -> Shape {
        self.tensor.shape()
    }

    pub fn height(&self) -> usize {
        self.tensor.shape().h
    }

    pub fn width(&self) -> usize {
        self.tensor.shape().w
    }

    #[inline]
    pub fn u(&self, n: usize, y: usize, x: usize) -> T {
        self.tensor.at(n, 0, y, x)
    }

    #[inline]
    pub fn v(&self, n: usize, y: usize, x: usize) -> T {
        self.tensor.at(n, 1, y, x)
    }

    pub fn set(&mut self, n: usize, y: usize, x: usize, u: T, v: T) {
        self.tensor.set(n, 0, y, x, u);
        self.tensor.set(n, 1, y, x, v);
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn cast<U: Real>(&self) -> FlowField<U> {
        FlowField { tensor: self.tensor.cast() }
    }

    /// Mean endpoint error against `other` over pixels where `mask` is true.
    pub fn endpoint_error(&self, other: &FlowField<T>, mask: impl Fn(usize, usize) -> bool) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(dim_err!("flow shapes differ: {} vs {}", self.shape(), other.shape()));
        }
        let s = self.shape();
        let (mut total, mut count) = (0.0, 0usize);
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    if !mask(y, x) {
                        continue;
                    }
                    let du = (self.u(n, y, x) - other.u(n, y, x)).to_f64_lossy();
                    let dv = (self.v(n, y, x) - other.v(n, y, x)).to_f64_lossy();
                    total += (du * du + dv * dv).sqrt();
                    count += 1;
                }
            }
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    /// Encodes a single-batch flow field in Middlebury `.flo` layout.
    pub fn to_flo_bytes(&self) -> Result<Vec<u8>> {
        let s = self.shape();
        if s.n != 1 {
            return Err(dim_err!(".flo holds a single flow field, got batch {}", s.n));
        }
        let mut out = Vec::with_capacity(12 + 8 * s.plane());
        out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        out.extend_from_slice(&(s.w as u32).to_le_bytes());
        out.extend_from_slice(&(s.h as u32).to_le_bytes());
        for y in 0..s.h {
            for x in 0..s.w {
                out.extend_from_slice(&self.u(0, y, x).to_f32().unwrap_or(f32::NAN).to_le_bytes());
                out.extend_from_slice(&self.v(0, y, x).to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_flo_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Format("truncated .flo header".into()));
        }
        let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
        let magic = f32::from_le_bytes(word(0));
        if magic != FLO_MAGIC {
            return Err(Error::Format(format!("bad .flo magic {magic}")));
        }
        let w = u32::from_le_bytes(word(4)) as usize;
        let h = u32::from_le_bytes(word(8)) as usize;
        let expected = w
            .checked_mul(h)
            .and_then(|p| p.checked_mul(8))
            .and_then(|p| p.checked_add(12))
            .ok_or_else(|| Error::Format(format!(".flo dimensions {w}x{h} overflow")))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                ".flo header declares {w}x{h} ({expected} bytes) but file has {} bytes",
                bytes.len()
            )));
        }
        let mut flow = FlowField::zeros(1, h, w);
        for y in 0..h {
            for x in 0..w {
                let off = 12 + 8 * (y * w + x);
                let u = f32::from_le_bytes(word(off));
                let v = f32::from_le_bytes(word(off + 4));
                flow.set(0, y, x, T::c(u as f64), T::c(v as f64));
            }
        }
        Ok(flow)
    }
}

pub fn write_flo<T: Real>(path: &Path, flow: &FlowField<T>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&flow.to_flo_bytes()?)?;
    Ok(())
}

pub fn read_flo<T: Real>(path: &Path) -> Result<FlowField<T>> {
    FlowField::from_flo_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_channel_count() {
        assert!(FlowField::new(Tensor::<f32>::zeros(Shape::new(1, 3, 2, 2))).is_err());
    }

    #[test]
    fn flo_round_trip_is_bitwise() {
        let mut f = FlowField::<f32>::zeros(1, 3, 4);
        f.set(0, 1, 2, -1.25, 3.0e-7);
        f.set(0, 2, 3, 7.5, -0.0);
        let bytes = f.to_flo_bytes().unwrap();
        assert_eq!(bytes.len(), 12 + 8 * 12);
        let back = FlowField::<f32>::from_flo_bytes(&bytes).unwrap();
        let a: Vec<u32> = f.tensor().data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.tensor().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn flo_bad_magic_and_length() {
        let f = FlowField::<f32>::zeros(1, 2, 2);
        let mut bytes = f.to_flo_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(matches!(FlowField::<f32>::from_flo_bytes(&bad), Err(Error::Format(_))));
        bytes.pop();
        assert!(matches!(FlowField::<f32>::from_flo_bytes(&bytes), Err(Error::Format(_))));
        bytes.extend_from_slice(&[0, 0]);
        assert!(matches!(FlowField::<f32>::from_flo_bytes(&bytes), Err(Error::Format(_))));
    }
}
