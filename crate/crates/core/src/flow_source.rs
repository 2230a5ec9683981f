//! Producers of reverse flow: exhaustive block matching, `.flo` files, or
//! the synthetic generator's ground truth.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, invalid, Result};
use crate::flow::{read_flo, FlowField};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockMatchParams {
    pub patch: usize,
    pub radius: usize,
    pub subpixel: bool,
}

impl Default for BlockMatchParams {
    fn default() -> Self {
        BlockMatchParams { patch: 8, radius: 8, subpixel: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FlowMethod {
    GroundTruth(FlowField<f32>),
    BlockMatch(BlockMatchParams),
    File(PathBuf),
}

pub struct FlowRequest<'a> {
    pub frame_t: &'a Tensor<f32>,
    pub frame_prev: &'a Tensor<f32>,
    pub method: FlowMethod,
}

impl FlowRequest<'_> {
    pub fn compute(&self) -> Result<FlowField<f32>> {
        let (st, sp) = (self.frame_t.shape(), self.frame_prev.shape());
        if st != sp {
            return Err(dim_err!("frames differ in shape: {st} vs {sp}"));
        }
        let flow = match &self.method {
            FlowMethod::GroundTruth(f) => f.clone(),
            FlowMethod::BlockMatch(p) => block_match_flow(self.frame_t, self.frame_prev, p)?,
            FlowMethod::File(path) => read_flo(path)?,
        };
        if flow.height() != st.h || flow.width() != st.w {
            return Err(dim_err!("flow {} does not match frames {st}", flow.shape()));
        }
        Ok(flow)
    }
}

/// Channel-mean intensity in fixed point (1/1024 steps) so that SSD
/// comparisons and ties are exact.
fn quantized_gray<T: Real>(frame: &Tensor<T>) -> Vec<i64> {
    let s = frame.shape();
    let inv = 1.0 / s.c as f64;
    (0..s.plane())
        .map(|p| {
            let mean: f64 = (0..s.c).map(|c| frame.plane(0, c)[p].to_f64_lossy()).sum::<f64>() * inv;
            (mean * 1024.0).round() as i64
        })
        .collect()
}

/// Dense reverse flow by exhaustive SSD block matching over grayscale
/// frames, followed by per-axis parabolic sub-pixel refinement.
///
/// For every pixel of `frame_t` the patch centred on it is compared with
/// patches of `frame_prev` displaced by up to `radius` pixels. Ties go to the
/// smallest displacement ordered by `(|u| + |v|, u, v)`.
pub fn block_match_flow<T: Real>(frame_t: &Tensor<T>, frame_prev: &Tensor<T>, params: &BlockMatchParams) -> Result<FlowField<T>> {
    let (st, sp) = (frame_t.shape(), frame_prev.shape());
    if st != sp {
        return Err(dim_err!("frames differ in shape: {st} vs {sp}"));
    }
    if st.n != 1 {
        return Err(dim_err!("block matching takes single frames, got batch {}", st.n));
    }
    if params.patch == 0 {
        return Err(invalid!("patch size must be positive"));
    }
    if st.h < params.patch || st.w < params.patch {
        return Err(invalid!("frames {}x{} smaller than patch {}", st.h, st.w, params.patch));
    }
    let (h, w) = (st.h, st.w);
    let m = Matcher {
        h,
        w,
        cur: quantized_gray(frame_t),
        prev: quantized_gray(frame_prev),
        r: params.radius as isize,
        lo: params.patch as isize / 2,
        hi: params.patch as isize - params.patch as isize / 2 - 1,
    };
    let r = m.r;

    // Displacements in tie-break order; a later candidate wins only with a strictly lower cost.
    let mut order: Vec<(isize, isize)> = (-r..=r).flat_map(|v| (-r..=r).map(move |u| (u, v))).collect();
    order.sort_by_key(|&(u, v)| (u.abs() + v.abs(), u, v));
    let mut best = vec![(i64::MAX, 0isize, 0isize); h * w];
    let mut sat = vec![0i64; (h + 1) * (w + 1)];
    for &(du, dv) in &order {
        for y in 0..h {
            let sy = (y as isize + dv).clamp(0, h as isize - 1) as usize;
            let mut row = 0i64;
            for x in 0..w {
                let sx = (x as isize + du).clamp(0, w as isize - 1) as usize;
                let d = m.cur[y * w + x] - m.prev[sy * w + sx];
                row += d * d;
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        let (ylo, yhi) = ((-dv).max(0) as usize, (h as isize - dv.max(0)) as usize);
        let (xlo, xhi) = ((-du).max(0) as usize, (w as isize - du.max(0)) as usize);
        for y in ylo..yhi {
            let (y0, y1) = m.rows(y);
            for x in xlo..xhi {
                let (x0, x1) = m.cols(x);
                let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
                let b = &mut best[y * w + x];
                if s < b.0 {
                    *b = (s, du, dv);
                }
            }
        }
    }

    let mut flow = FlowField::zeros(1, h, w);
    for (p, &(s, u, v)) in best.iter().enumerate() {
        let (y, x) = (p / w, p % w);
        let (mut fu, mut fv) = (u as f64, v as f64);
        // A zero-cost match is exact; refinement would only pick up asymmetry of the neighbours.
        if params.subpixel && s > 0 {
            fu += refine(m.ssd(u - 1, v, y, x), s, m.ssd(u + 1, v, y, x));
            fv += refine(m.ssd(u, v - 1, y, x), s, m.ssd(u, v + 1, y, x));
        }
        flow.set(0, y, x, T::c(fu), T::c(fv));
    }
    Ok(flow)
}

struct Matcher {
    h: usize,
    w: usize,
    cur: Vec<i64>,
    prev: Vec<i64>,
    r: isize,
    lo: isize,
    hi: isize,
}

impl Matcher {
    /// Patch rows around `y`, cropped to the frame, as a half-open range.
    fn rows(&self, y: usize) -> (usize, usize) {
        ((y as isize - self.lo).max(0) as usize, ((y as isize + self.hi).min(self.h as isize - 1) + 1) as usize)
    }

    fn cols(&self, x: usize) -> (usize, usize) {
        ((x as isize - self.lo).max(0) as usize, ((x as isize + self.hi).min(self.w as isize - 1) + 1) as usize)
    }

    /// Patch SSD for one pixel and displacement; `None` if the displacement is
    /// outside the search window or moves the pixel off the frame.
    fn ssd(&self, u: isize, v: isize, y: usize, x: usize) -> Option<i64> {
        let (ty, tx) = (y as isize + v, x as isize + u);
        if u.abs() > self.r || v.abs() > self.r || ty < 0 || tx < 0 || ty >= self.h as isize || tx >= self.w as isize {
            return None;
        }
        let ((y0, y1), (x0, x1)) = (self.rows(y), self.cols(x));
        let mut sum = 0;
        for yy in y0..y1 {
            let sy = (yy as isize + v).clamp(0, self.h as isize - 1) as usize;
            for xx in x0..x1 {
                let sx = (xx as isize + u).clamp(0, self.w as isize - 1) as usize;
                let d = self.cur[yy * self.w + xx] - self.prev[sy * self.w + sx];
                sum += d * d;
            }
        }
        Some(sum)
    }
}

/// Parabola vertex offset through three costs, limited to half a pixel.
fn refine(minus: Option<i64>, centre: i64, plus: Option<i64>) -> f64 {
    let (Some(m), Some(p)) = (minus, plus) else { return 0.0 };
    let denom = (m - 2 * centre + p) as f64;
    if denom <= 0.0 {
        return 0.0;
    }
    ((m - p) as f64 / (2.0 * denom)).clamp(-0.5, 0.5)
}
