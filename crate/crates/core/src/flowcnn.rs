//! Learned flow transformation.
//!
//! Input: 11 channels `[flow(2), frame_t(3), frame_prev(3), frame_t - frame_prev(3)]`.
//! `conv1(16) -> ReLU -> conv2(32) -> ReLU -> conv3(2)`, concatenated with the
//! original flow, then `conv4(2)` regresses the transformed flow. All 3x3,
//! padding 1, stride 1. Frames are expected in `[0, 1]`.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::flow::FlowField;
use crate::ops;
use crate::params::{Bound, ParamSet};
use crate::tape::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

pub const INPUT_CHANNELS: usize = 11;
/// `(name, out_channels, in_channels)` of the four conv layers.
pub const LAYERS: [(&str, usize, usize); 4] =
    [("conv1", 16, 11), ("conv2", 32, 16), ("conv3", 2, 32), ("conv4", 2, 4)];
pub const PARAM_COUNT: usize = 6892;
pub const INIT_STD: f64 = 0.01;

/// Adds Gaussian-initialized flow CNN weights (zero biases) under `flowcnn.`.
pub fn init_params<T: Real, R: Rng + ?Sized>(ps: &mut ParamSet<T>, rng: &mut R) -> Result<()> {
    for (name, cout, cin) in LAYERS {
        ps.insert(format!("flowcnn.{name}.w"), Tensor::randn(Shape::new(cout, cin, 3, 3), INIT_STD, rng));
        ps.insert(format!("flowcnn.{name}.b"), Tensor::vector(vec![T::zero(); cout]));
    }
    let count = ps.count_with_prefix("flowcnn.");
    if count != PARAM_COUNT {
        return Err(Error::Config(format!("flow CNN has {count} parameters, expected {PARAM_COUNT}")));
    }
    Ok(())
}

fn check_frames(flow: (usize, usize, usize), t: Shape, p: Shape) -> Result<()> {
    for s in [t, p] {
        if s.c != 3 || s.n != flow.0 || s.h != flow.1 || s.w != flow.2 {
            return Err(dim_err!(
                "frames must be {}x3x{}x{} to match the flow, got {t} and {p}",
                flow.0,
                flow.1,
                flow.2
            ));
        }
    }
    Ok(())
}

/// The 11-channel flow CNN input as a plain tensor.
pub fn build_input<T: Real>(flow: &FlowField<T>, frame_t: &Tensor<T>, frame_prev: &Tensor<T>) -> Result<Tensor<T>> {
    let fs = flow.shape();
    check_frames((fs.n, fs.h, fs.w), frame_t.shape(), frame_prev.shape())?;
    let diff = ops::zip_same(frame_t, frame_prev, |a, b| a - b)?;
    ops::concat_forward(&[flow.tensor(), frame_t, frame_prev, &diff])
}

/// Records the 11-channel input on the graph.
pub fn build_input_var<T: Real>(g: &mut Graph<T>, flow: Var, frame_t: Var, frame_prev: Var) -> Result<Var> {
    let fs = g.shape(flow);
    if fs.c != 2 {
        return Err(dim_err!("flow must have 2 channels, got {fs}"));
    }
    check_frames((fs.n, fs.h, fs.w), g.shape(frame_t), g.shape(frame_prev))?;
    let diff = g.sub(frame_t, frame_prev)?;
    g.concat_channels(&[flow, frame_t, frame_prev, diff])
}

/// Transformed flow for an 11-channel input and the original flow.
pub fn forward<T: Real>(g: &mut Graph<T>, params: &Bound, input: Var, flow: Var) -> Result<Var> {
    let s = g.shape(input);
    if s.c != INPUT_CHANNELS {
        return Err(dim_err!("flow CNN input needs {INPUT_CHANNELS} channels, got {s}"));
    }
    let conv = |g: &mut Graph<T>, x: Var, name: &str| -> Result<Var> {
        let w = params.get(&format!("flowcnn.{name}.w"))?;
        let b = params.get(&format!("flowcnn.{name}.b"))?;
        g.conv2d(x, w, Some(b), 1, 1)
    };
    let h = conv(g, input, "conv1")?;
    let h = g.relu(h)?;
    let h = conv(g, h, "conv2")?;
    let h = g.relu(h)?;
    let h = conv(g, h, "conv3")?;
    let skip = g.concat_channels(&[h, flow])?;
    conv(g, skip, "conv4")
}
