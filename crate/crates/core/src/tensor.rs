//! Dense 4-D tensors in (batch, channel, height, width) layout.

use std::fmt;
use std::io::{Read, Write};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};

/// Floating point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("constant representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Tensor shape (batch, channels, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one channel plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn same_spatial(&self, other: &Shape) -> bool {
        self.h == other.h && self.w == other.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

pub const TENSOR_MAGIC: &[u8; 4] = b"NWT1";

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.numel()] }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(dim_err!("shape {shape} needs {} values, got {}", shape.numel(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    /// Channel vector stored as a 1xCx1x1 tensor.
    pub fn vector(values: Vec<T>) -> Self {
        Tensor { shape: Shape::new(1, values.len(), 1, 1), data: values }
    }

    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::c(z * std)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| T::c(rng.random_range(lo..hi))).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// One (batch, channel) plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(dim_err!("cannot reshape {} into {shape}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::c(v.to_f64_lossy())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Channels `[start, start + count)` as a new tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        let s = self.shape;
        if start + count > s.c {
            return Err(dim_err!("channel slice {start}..{} out of range for {s}", start + count));
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n * count * p);
        for n in 0..s.n {
            let base = (n * s.c + start) * p;
            data.extend_from_slice(&self.data[base..base + count * p]);
        }
        Ok(Tensor { shape: Shape::new(s.n, count, s.h, s.w), data })
    }

    /// Stack along the batch dimension.
    pub fn stack_batch(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| dim_err!("cannot stack zero tensors"))?.shape;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            let s = p.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(dim_err!("cannot stack {s} with {first}"));
            }
            data.extend_from_slice(&p.data);
        }
        let n = parts.iter().map(|p| p.shape.n).sum();
        Ok(Tensor { shape: Shape::new(n, first.c, first.h, first.w), data })
    }

    /// Writes the `NWT1` binary encoding (values stored as 32-bit floats).
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(TENSOR_MAGIC)?;
        let s = self.shape;
        for d in [s.n, s.c, s.h, s.w] {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
            out.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(input, &mut magic, "tensor magic")?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            read_exact(input, &mut b, "tensor header")?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let mut raw = vec![0u8; shape.numel() * 4];
        read_exact(input, &mut raw, "tensor payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::c(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.len() * 4);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

pub(crate) fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        let t = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(0, 0, 1, 0), 3.0);
    }

    #[test]
    fn nwt1_layout() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 2, 1, 1), vec![1.5, -2.0]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"NWT1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 28);
        let back = Tensor::<f32>::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_tensor_is_format_error() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 3));
        let bytes = t.to_bytes();
        let err = Tensor::<f32>::read_from(&mut &bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::<f32>::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn slice_and_stack() {
        let t = Tensor::<f64>::from_vec(Shape::new(2, 3, 1, 1), (0..6).map(f64::from).collect()).unwrap();
        let s = t.slice_channels(1, 2).unwrap();
        assert_eq!(s.data(), &[1.0, 2.0, 4.0, 5.0]);
        let st = Tensor::stack_batch(&[&s, &s]).unwrap();
        assert_eq!(st.shape(), Shape::new(4, 2, 1, 1));
    }
}
