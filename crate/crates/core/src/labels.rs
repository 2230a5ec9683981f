//! Per-pixel label and instance-id maps, stored on disk as binary PGM (P5).

use std::io::{BufRead, Write};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(dim_err!("label map {height}x{width} needs {} values, got {}", width * height, data.len()));
        }
        Ok(LabelMap { width, height, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap { width, height, data: vec![value; width * height] }
    }

    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(dim_err!("ragged label rows"));
        }
        Ok(LabelMap { width, height, data: rows.concat() })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// `1 x classes x H x W` indicator tensor; ignored pixels are all-zero.
    pub fn one_hot<T: Real>(&self, classes: usize) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut t = Tensor::zeros(Shape::new(1, classes, self.height, self.width));
        for (p, &l) in self.data.iter().enumerate() {
            if (l as usize) < classes {
                t.data_mut()[l as usize * plane + p] = T::one();
            }
        }
        t
    }

    pub fn write_pgm<W: Write>(&self, out: &mut W) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_pgm<R: BufRead>(input: &mut R) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut line = String::new();
        while fields.len() < 4 {
            line.clear();
            if input.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated PGM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_owned));
        }
        if fields[0] != "P5" {
            return Err(Error::Format(format!("expected P5 PGM, found {:?}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field {s:?}")));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("only 8-bit PGM supported, maxval {maxval}")));
        }
        let mut data = vec![0u8; width * height];
        input.read_exact(&mut data).map_err(|_| Error::Format("truncated PGM payload".into()))?;
        Ok(LabelMap { width, height, data })
    }
}
