//! Small single-image segmentation network with named layers.
//!
//! Blocks `conv1..convN` are 3x3 convolutions followed by ReLU; blocks
//! `1..N-1` are followed by 2x2 max pooling. The `head` layer is a 1x1
//! convolution to class logits, bilinearly resized to the input resolution.
//! Each layer's output (post-ReLU, before pooling) is an insertion point.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tape::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

pub const HEAD: &str = "head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetConfig {
    pub in_channels: usize,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub num_classes: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig { in_channels: 3, channels: vec![16, 32, 64], num_classes: 3 }
    }
}

/// Hook called with each executed layer's name and output; returns the
/// representation that the rest of the network consumes.
pub type LayerHook<'a, T> = dyn FnMut(&mut Graph<T>, &str, Var) -> Result<Var> + 'a;

#[derive(Clone, Debug)]
pub struct SegNet {
    cfg: SegNetConfig,
    names: Vec<String>,
}

impl SegNet {
    pub fn new(cfg: SegNetConfig) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", cfg.num_classes)));
        }
        if cfg.channels.is_empty() || cfg.channels.contains(&0) || cfg.in_channels == 0 {
            return Err(Error::Config(format!("invalid channel plan {:?}", cfg.channels)));
        }
        let mut names: Vec<String> = (1..=cfg.channels.len()).map(|i| format!("conv{i}")).collect();
        names.push(HEAD.to_string());
        Ok(SegNet { cfg, names })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("unknown layer {name:?}; available: {:?}", self.names)))
    }

    /// Downsampling factor of a layer's output relative to the input.
    pub fn layer_stride(&self, name: &str) -> Result<usize> {
        let idx = self.layer_index(name)?;
        Ok(if idx == self.cfg.channels.len() { 1 } else { 1 << idx })
    }

    /// Output shape of `layer` for an input of the given shape.
    pub fn layer_shape(&self, name: &str, input: Shape) -> Result<Shape> {
        let idx = self.layer_index(name)?;
        if idx == self.cfg.channels.len() {
            return Ok(Shape::new(input.n, self.cfg.num_classes, input.h, input.w));
        }
        let (mut h, mut w) = (input.h, input.w);
        for _ in 0..idx {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        Ok(Shape::new(input.n, self.cfg.channels[idx], h, w))
    }

    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let mut ps = ParamSet::new();
        self.init_into(&mut ps, rng);
        ps
    }

    pub fn param_shapes(&self) -> Vec<(String, Shape)> {
        let mut out = Vec::new();
        let mut cin = self.cfg.in_channels;
        for (i, &cout) in self.cfg.channels.iter().enumerate() {
            out.push((format!("segnet.conv{}.w", i + 1), Shape::new(cout, cin, 3, 3)));
            out.push((format!("segnet.conv{}.b", i + 1), Shape::new(1, cout, 1, 1)));
            cin = cout;
        }
        out.push(("segnet.head.w".into(), Shape::new(self.cfg.num_classes, cin, 1, 1)));
        out.push(("segnet.head.b".into(), Shape::new(1, self.cfg.num_classes, 1, 1)));
        out
    }

    /// He-normal weights, zero biases, under the `segnet.` prefix.
    pub fn init_into<T: Real, R: Rng + ?Sized>(&self, ps: &mut ParamSet<T>, rng: &mut R) {
        let mut cin = self.cfg.in_channels;
        for (i, &cout) in self.cfg.channels.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            ps.insert(format!("segnet.conv{}.w", i + 1), Tensor::randn(Shape::new(cout, cin, 3, 3), std, rng));
            ps.insert(format!("segnet.conv{}.b", i + 1), Tensor::vector(vec![T::zero(); cout]));
            cin = cout;
        }
        let std = (1.0 / cin as f64).sqrt();
        ps.insert("segnet.head.w", Tensor::randn(Shape::new(self.cfg.num_classes, cin, 1, 1), std, rng));
        ps.insert("segnet.head.b", Tensor::vector(vec![T::zero(); self.cfg.num_classes]));
    }

    /// Executes layers `from..=to` starting from `x` (the input if `from == 0`,
    /// otherwise the output of layer `from - 1`). `out_hw` is the input
    /// resolution the head resizes to.
    pub fn run_range<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Bound,
        x: Var,
        from: usize,
        to: usize,
        out_hw: (usize, usize),
        hook: &mut LayerHook<'_, T>,
    ) -> Result<Var> {
        let blocks = self.cfg.channels.len();
        let mut cur = x;
        for idx in from..=to.min(blocks) {
            if idx > 0 && idx < blocks {
                cur = g.maxpool2(cur)?;
            }
            let name = &self.names[idx];
            if idx < blocks {
                let w = params.get(&format!("segnet.{name}.w"))?;
                let b = params.get(&format!("segnet.{name}.b"))?;
                let conv = g.conv2d(cur, w, Some(b), 1, 1)?;
                cur = g.relu(conv)?;
            } else {
                let w = params.get("segnet.head.w")?;
                let b = params.get("segnet.head.b")?;
                let logits = g.conv2d(cur, w, Some(b), 0, 1)?;
                cur = g.upsample_bilinear(logits, out_hw.0, out_hw.1)?;
            }
            cur = hook(g, name, cur)?;
        }
        Ok(cur)
    }

    /// Activations of `layer` for `input`.
    pub fn forward_to<T: Real>(&self, g: &mut Graph<T>, params: &Bound, input: Var, layer: &str) -> Result<Var> {
        let idx = self.layer_index(layer)?;
        let s = g.shape(input);
        self.run_range(g, params, input, 0, idx, (s.h, s.w), &mut |_, _, v| Ok(v))
    }

    /// Logits at input resolution.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &Bound, input: Var) -> Result<Var> {
        self.forward_to(g, params, input, HEAD)
    }

    /// Continues from cached activations of `layer` to the logits.
    pub fn resume_from<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Bound,
        layer: &str,
        activation: Var,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let idx = self.layer_index(layer)?;
        if idx == self.cfg.channels.len() {
            return Ok(activation);
        }
        self.run_range(g, params, activation, idx + 1, self.cfg.channels.len(), out_hw, &mut |_, _, v| Ok(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> SegNet {
        SegNet::new(SegNetConfig::default()).unwrap()
    }

    #[test]
    fn layer_strides_and_shapes() {
        let n = net();
        assert_eq!(n.layer_names(), &["conv1", "conv2", "conv3", "head"]);
        assert_eq!(n.layer_stride("conv1").unwrap(), 1);
        assert_eq!(n.layer_stride("conv2").unwrap(), 2);
        assert_eq!(n.layer_stride("conv3").unwrap(), 4);
        assert_eq!(n.layer_stride("head").unwrap(), 1);
        assert!(matches!(n.layer_stride("fc7"), Err(Error::Config(_))));
    }

    #[test]
    fn conv2_activation_shape() {
        let n = net();
        let ps = n.init_params::<f32, _>(&mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let x = g.constant(Tensor::rand_uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let a = n.forward_to(&mut g, &b, x, "conv2").unwrap();
        assert_eq!(g.shape(a), Shape::new(1, 32, 16, 16));
        assert_eq!(n.layer_shape("conv2", Shape::new(1, 3, 32, 32)).unwrap(), g.shape(a));
        let logits = n.forward(&mut g, &b, x).unwrap();
        assert_eq!(g.shape(logits), Shape::new(1, 3, 32, 32));
    }

    #[test]
    fn rejects_single_class() {
        assert!(SegNet::new(SegNetConfig { num_classes: 1, ..Default::default() }).is_err());
    }
}
