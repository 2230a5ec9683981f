#![allow(dead_code)]

use netwarp::netwarp::{argmax_labels, VideoSegModel};
use netwarp::synth::{random_scene, RandomSceneConfig, NUM_CLASSES};
use netwarp::warp::{warp, WarpConfig};
use netwarp::tensor::{Real, Shape, Tensor};
use netwarp::{FlowField, Graph, ParamSet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Per-pixel bilinear sampling written straight from the interpolation
/// formula, sharing nothing with the library kernel.
pub fn naive_warp<T: Real>(features: &Tensor<T>, flow: &FlowField<T>, eps: T) -> Tensor<T> {
    let s = features.shape();
    let mut out = Tensor::zeros(s);
    let (wmax, hmax) = (T::c((s.w - 1) as f64), T::c((s.h - 1) as f64));
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let xs = (T::c(x as f64) + (flow.u(n, y, x) + eps)).max(T::zero()).min(wmax);
                let ys = (T::c(y as f64) + (flow.v(n, y, x) + eps)).max(T::zero()).min(hmax);
                let (x1, y1) = (xs.floor(), ys.floor());
                let (x2, y2) = (x1 + T::one(), y1 + T::one());
                let wx = [x2 - xs, xs - x1];
                let wy = [y2 - ys, ys - y1];
                let ix1 = x1.to_usize().unwrap();
                let iy1 = y1.to_usize().unwrap();
                let ix2 = (ix1 + 1).min(s.w - 1);
                let iy2 = (iy1 + 1).min(s.h - 1);
                for c in 0..s.c {
                    let z = |yy: usize, xx: usize| features.at(n, c, yy, xx);
                    let v = wx[0] * (z(iy1, ix1) * wy[0] + z(iy2, ix1) * wy[1])
                        + wx[1] * (z(iy1, ix2) * wy[0] + z(iy2, ix2) * wy[1]);
                    out.set(n, c, y, x, v);
                }
            }
        }
    }
    out
}

pub fn random_case<T: Real>(rng: &mut ChaCha8Rng, integer: bool) -> (Tensor<T>, FlowField<T>) {
    let (c, h, w) = (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=8));
    let features = Tensor::rand_uniform(Shape::new(1, c, h, w), -1.0, 1.0, rng);
    let lim = h as f64;
    let mut flow = Tensor::<T>::rand_uniform(Shape::new(1, 2, h, w), -lim, lim, rng);
    if integer {
        for v in flow.data_mut() {
            *v = v.round();
        }
    }
    (features, FlowField::new(flow).unwrap())
}

pub fn two_frame_logits(m: &VideoSegModel, ps: &ParamSet<f32>, prev: &Tensor<f32>, cur: &Tensor<f32>, f: &FlowField<f32>) -> Tensor<f32> {
    let mut g = Graph::new();
    let bound = ps.bind(&mut g);
    let (a, b, c) = (g.constant(prev.clone()), g.constant(cur.clone()), g.constant(f.tensor().clone()));
    let out = m.two_frame_forward(&mut g, &bound, a, b, c).unwrap();
    g.value(out).clone()
}

pub fn single_logits(m: &VideoSegModel, ps: &ParamSet<f32>, x: &Tensor<f32>) -> Tensor<f32> {
    let mut g = Graph::new();
    let bound = ps.bind(&mut g);
    let v = g.constant(x.clone());
    let out = m.net.forward(&mut g, &bound, v).unwrap();
    g.value(out).clone()
}

/// Fraction of non-occluded pixels whose label survives warping the previous
/// label map (one-hot) with the ground-truth flow.
pub fn label_agreement(seed: u64) -> (usize, usize) {
    let (_, seq) = random_scene(&RandomSceneConfig::default(), seed).unwrap();
    let (mut agree, mut total) = (0, 0);
    for t in 1..seq.len() {
        let prev = seq.labels[t - 1].one_hot::<f32>(NUM_CLASSES);
        let warped = warp(&prev, seq.gt_flow[t].as_ref().unwrap(), &WarpConfig::default()).unwrap();
        let pred = &argmax_labels(&warped)[0];
        let occ = seq.occlusion[t].as_ref().unwrap();
        for p in 0..pred.data().len() {
            if occ.data()[p] == 0 {
                total += 1;
                agree += usize::from(pred.data()[p] == seq.labels[t].data()[p]);
            }
        }
    }
    (agree, total)
}
