//! Differentiable bilinear warping of previous-frame representations.
//!
//! For an output pixel `(x, y)` the sample point is
//! `x' = x + (u + eps)`, `y' = y + (v + eps)`. Points outside the feature map
//! are projected onto the nearest border, then the value is interpolated from
//! the four corners `(x1, y1) .. (x2, y2)` of the enclosing grid cell:
//!
//! ```text
//! out = [x2 - x', x' - x1] . [[z(x1,y1), z(x1,y2)], [z(x2,y1), z(x2,y2)]] . [y2 - y', y' - y1]^T
//! ```
//!
//! The nudge `eps` keeps sample points off grid lines, so the result is
//! differentiable with respect to both the features and the flow.

use rayon::prelude::*;

use crate::error::{dim_err, invalid, Result};
use crate::flow::FlowField;
use crate::tensor::{Real, Shape, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpConfig {
    /// Added to both flow components before sampling. Must be positive.
    pub epsilon: f64,
    /// Stride between the flow's pixel grid and the warped representation.
    pub flow_stride: usize,
}

impl Default for WarpConfig {
    fn default() -> Self {
        WarpConfig { epsilon: DEFAULT_EPSILON, flow_stride: 1 }
    }
}

impl WarpConfig {
    pub fn with_stride(flow_stride: usize) -> Self {
        WarpConfig { flow_stride, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(invalid!("warp epsilon must be positive, got {}", self.epsilon));
        }
        if self.flow_stride == 0 {
            return Err(invalid!("flow stride must be >= 1"));
        }
        Ok(())
    }
}

/// Interpolation support of one output pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Sample<T> {
    pub x1: usize,
    pub x2: usize,
    pub y1: usize,
    pub y2: usize,
    /// `x2 - x'` and `x' - x1` (cell coordinates, before index clamping).
    pub ax: [T; 2],
    pub ay: [T; 2],
    pub clamped_x: bool,
    pub clamped_y: bool,
}

#[inline]
fn axis<T: Real>(pos: usize, disp: T, eps: T, len: usize) -> (usize, usize, [T; 2], bool) {
    let hi = T::c((len - 1) as f64);
    let raw = T::c(pos as f64) + (disp + eps);
    let (p, clamped) = if raw < T::zero() {
        (T::zero(), true)
    } else if raw > hi {
        (hi, true)
    } else {
        (raw, false)
    };
    let c1 = p.floor();
    let c2 = c1 + T::one();
    let i1 = c1.to_usize().unwrap_or(0);
    let i2 = (i1 + 1).min(len - 1);
    (i1, i2, [c2 - p, p - c1], clamped)
}

#[inline]
pub(crate) fn sample_point<T: Real>(x: usize, y: usize, u: T, v: T, eps: T, w: usize, h: usize) -> Sample<T> {
    let (x1, x2, ax, clamped_x) = axis(x, u, eps, w);
    let (y1, y2, ay, clamped_y) = axis(y, v, eps, h);
    Sample { x1, x2, y1, y2, ax, ay, clamped_x, clamped_y }
}

#[inline]
fn corners<T: Real>(plane: &[T], w: usize, s: &Sample<T>) -> [T; 4] {
    [plane[s.y1 * w + s.x1], plane[s.y2 * w + s.x1], plane[s.y1 * w + s.x2], plane[s.y2 * w + s.x2]]
}

#[inline]
fn interpolate<T: Real>(z: [T; 4], s: &Sample<T>) -> T {
    let [z11, z12, z21, z22] = z;
    s.ax[0] * (z11 * s.ay[0] + z12 * s.ay[1]) + s.ax[1] * (z21 * s.ay[0] + z22 * s.ay[1])
}

pub(crate) fn check_warp_shapes<T: Real>(features: &Tensor<T>, flow: &Tensor<T>) -> Result<()> {
    let (fs, ws) = (features.shape(), flow.shape());
    if ws.c != 2 {
        return Err(dim_err!("flow must have 2 channels, got {ws}"));
    }
    if fs.n != ws.n || !fs.same_spatial(&ws) {
        return Err(dim_err!("flow {ws} does not match features {fs}"));
    }
    Ok(())
}

fn samples_for<T: Real>(flow: &Tensor<T>, n: usize, eps: T) -> Vec<Sample<T>> {
    let s = flow.shape();
    let u = flow.plane(n, 0);
    let v = flow.plane(n, 1);
    (0..s.plane()).map(|p| sample_point(p % s.w, p / s.w, u[p], v[p], eps, s.w, s.h)).collect()
}

pub(crate) fn warp_forward<T: Real>(features: &Tensor<T>, flow: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    check_warp_shapes(features, flow)?;
    let fs = features.shape();
    let mut out = Tensor::zeros(fs);
    let plane = fs.plane();
    for n in 0..fs.n {
        let samples = samples_for(flow, n, eps);
        let start = n * fs.c * plane;
        out.data_mut()[start..start + fs.c * plane]
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(c, dst)| {
                let src = features.plane(n, c);
                for (o, s) in dst.iter_mut().zip(&samples) {
                    *o = interpolate(corners(src, fs.w, s), s);
                }
            });
    }
    Ok(out)
}

/// Gradients of the warp with respect to the features and the flow.
pub(crate) fn warp_backward_kernel<T: Real>(
    upstream: &Tensor<T>,
    features: &Tensor<T>,
    flow: &Tensor<T>,
    eps: T,
    need: (bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let fs = features.shape();
    let plane = fs.plane();
    let mut gfeat = need.0.then(|| Tensor::zeros(fs));
    let mut gflow = need.1.then(|| Tensor::zeros(flow.shape()));
    for n in 0..fs.n {
        let samples = samples_for(flow, n, eps);
        if let Some(gf) = gfeat.as_mut() {
            let start = n * fs.c * plane;
            gf.data_mut()[start..start + fs.c * plane]
                .par_chunks_mut(plane)
                .enumerate()
                .for_each(|(c, dst)| {
                    let g = upstream.plane(n, c);
                    for (s, &gv) in samples.iter().zip(g) {
                        let top = s.ax[0] * gv;
                        let bot = s.ax[1] * gv;
                        dst[s.y1 * fs.w + s.x1] += top * s.ay[0];
                        dst[s.y2 * fs.w + s.x1] += top * s.ay[1];
                        dst[s.y1 * fs.w + s.x2] += bot * s.ay[0];
                        dst[s.y2 * fs.w + s.x2] += bot * s.ay[1];
                    }
                });
        }
        if let Some(gw) = gflow.as_mut() {
            let mut du = vec![T::zero(); plane];
            let mut dv = vec![T::zero(); plane];
            for c in 0..fs.c {
                let src = features.plane(n, c);
                let g = upstream.plane(n, c);
                for (p, s) in samples.iter().enumerate() {
                    let [z11, z12, z21, z22] = corners(src, fs.w, s);
                    if !s.clamped_x {
                        let dx = (z21 * s.ay[0] + z22 * s.ay[1]) - (z11 * s.ay[0] + z12 * s.ay[1]);
                        du[p] += g[p] * dx;
                    }
                    if !s.clamped_y {
                        let dy = s.ax[0] * (z12 - z11) + s.ax[1] * (z22 - z21);
                        dv[p] += g[p] * dy;
                    }
                }
            }
            let d = gw.data_mut();
            d[(2 * n) * plane..(2 * n + 1) * plane].copy_from_slice(&du);
            d[(2 * n + 1) * plane..(2 * n + 2) * plane].copy_from_slice(&dv);
        }
    }
    (gfeat, gflow)
}

/// Warps `features` by the reverse flow `flow`.
pub fn warp<T: Real>(features: &Tensor<T>, flow: &FlowField<T>, cfg: &WarpConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    warp_forward(features, flow.tensor(), T::c(cfg.epsilon))
}

/// Vector-Jacobian product of [`warp`]: returns the feature and flow gradients
/// for an upstream gradient of the warped output.
pub fn warp_backward<T: Real>(
    upstream: &Tensor<T>,
    features: &Tensor<T>,
    flow: &FlowField<T>,
    cfg: &WarpConfig,
) -> Result<(Tensor<T>, FlowField<T>)> {
    cfg.validate()?;
    check_warp_shapes(features, flow.tensor())?;
    if upstream.shape() != features.shape() {
        return Err(dim_err!("upstream {} does not match features {}", upstream.shape(), features.shape()));
    }
    let (gf, gw) = warp_backward_kernel(upstream, features, flow.tensor(), T::c(cfg.epsilon), (true, true));
    Ok((gf.expect("requested"), FlowField::new(gw.expect("requested"))?))
}

pub fn subsampled_dims(h: usize, w: usize, stride: usize) -> (usize, usize) {
    (h.div_ceil(stride), w.div_ceil(stride))
}

pub(crate) fn subsample_forward<T: Real>(flow: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    if stride == 0 {
        return Err(invalid!("flow stride must be >= 1"));
    }
    let s = flow.shape();
    let (oh, ow) = subsampled_dims(s.h, s.w, stride);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let scale = T::c(stride as f64);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..oh {
                for x in 0..ow {
                    out.set(n, c, y, x, flow.at(n, c, y * stride, x * stride) / scale);
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn subsample_backward<T: Real>(input_shape: Shape, gout: &Tensor<T>, stride: usize) -> Tensor<T> {
    let gs = gout.shape();
    let mut gx = Tensor::zeros(input_shape);
    let scale = T::c(stride as f64);
    for n in 0..gs.n {
        for c in 0..gs.c {
            for y in 0..gs.h {
                for x in 0..gs.w {
                    let i = gx.index(n, c, y * stride, x * stride);
                    gx.data_mut()[i] += gout.at(n, c, y, x) / scale;
                }
            }
        }
    }
    gx
}

/// Samples the flow every `stride` pixels and divides displacements by
/// `stride`, giving correspondences on the coarser grid.
pub fn subsample_flow<T: Real>(flow: &FlowField<T>, stride: usize) -> Result<FlowField<T>> {
    FlowField::new(subsample_forward(flow.tensor(), stride)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat_2x2() -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1., 2., 3., 4.]).unwrap()
    }

    #[test]
    fn zero_flow_is_nudged_identity() {
        let out = warp(&feat_2x2(), &FlowField::zeros(1, 2, 2), &WarpConfig::default()).unwrap();
        for (a, b) in out.data().iter().zip([1., 2., 3., 4.]) {
            assert!((a - b).abs() <= 6e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn half_pixel_flow_averages_corners() {
        let out = warp(&feat_2x2(), &FlowField::uniform(1, 2, 2, 0.5, 0.5), &WarpConfig::default()).unwrap();
        assert!((out.at(0, 0, 0, 0) - 2.5).abs() <= 1e-3);
    }

    #[test]
    fn far_out_of_bounds_projects_to_border() {
        let f = Tensor::<f64>::from_vec(Shape::new(1, 1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let out = warp(&f, &FlowField::uniform(1, 3, 3, -3.0, -3.0), &WarpConfig::default()).unwrap();
        assert_eq!(out.at(0, 0, 0, 0), 1.0);
    }

    #[test]
    fn flow_feature_mismatch_is_dimension_error() {
        let err = warp(&feat_2x2(), &FlowField::zeros(1, 3, 2), &WarpConfig::default()).unwrap_err();
        assert!(matches!(err, crate::Error::Dimension(_)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let flow = FlowField::uniform(1, 2, 2, 0.3, -0.2);
        let (gf, gw) = warp_backward(&Tensor::zeros(Shape::new(1, 1, 2, 2)), &feat_2x2(), &flow, &WarpConfig::default()).unwrap();
        assert!(gf.data().iter().all(|&v| v == 0.0));
        assert!(gw.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_features_have_zero_flow_gradient() {
        let f = Tensor::full(Shape::new(1, 3, 4, 4), 2.5f64);
        let flow = FlowField::uniform(1, 4, 4, 0.7, 1.3);
        let up = Tensor::full(Shape::new(1, 3, 4, 4), 1.0);
        let (_, gw) = warp_backward(&up, &f, &flow, &WarpConfig::default()).unwrap();
        assert!(gw.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn subsample_stride_rules() {
        let f = FlowField::uniform(1, 4, 4, 2.0f32, 2.0);
        assert_eq!(subsample_flow(&f, 1).unwrap(), f);
        let half = subsample_flow(&f, 2).unwrap();
        assert_eq!(half.shape(), Shape::new(1, 2, 2, 2));
        assert!(half.tensor().data().iter().all(|&v| v == 1.0));
        let single = subsample_flow(&f, 4).unwrap();
        assert_eq!(single.shape(), Shape::new(1, 2, 1, 1));
        assert_eq!(subsample_flow(&FlowField::<f32>::zeros(1, 5, 3), 2).unwrap().shape(), Shape::new(1, 2, 3, 2));
        assert!(subsample_flow(&f, 0).is_err());
    }

    #[test]
    fn epsilon_must_be_positive() {
        let cfg = WarpConfig { epsilon: 0.0, flow_stride: 1 };
        assert!(warp(&feat_2x2(), &FlowField::zeros(1, 2, 2), &cfg).is_err());
    }
}
