//! The NetWarp module and its insertion into a base segmentation network.
//!
//! At an insertion layer with previous-frame activations `z_prev` and
//! present-frame activations `z_t`, the module computes
//! `w1 * z_t + w2 * warp(z_prev, flow)` with per-channel weights, where `flow`
//! is the (optionally transformed) reverse flow sampled at the layer's stride.
//! `w1` starts at one and `w2` at zero, so a fresh model reproduces the base
//! network exactly.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::flow::FlowField;
use crate::flowcnn;
use crate::labels::LabelMap;
use crate::params::{Bound, ParamSet};
use crate::segnet::SegNet;
use crate::tape::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};
use crate::warp::{self, WarpConfig};

/// Per-channel combination weights of one insertion point.
#[derive(Clone, Debug, PartialEq)]
pub struct CombineWeights<T> {
    pub w1: Vec<T>,
    pub w2: Vec<T>,
}

impl<T: Real> CombineWeights<T> {
    /// `w1 = 1`, `w2 = 0`.
    pub fn identity(channels: usize) -> Self {
        CombineWeights { w1: vec![T::one(); channels], w2: vec![T::zero(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.w1.len()
    }
}

pub fn w1_name(layer: &str) -> String {
    format!("netwarp.{layer}.w1")
}

pub fn w2_name(layer: &str) -> String {
    format!("netwarp.{layer}.w2")
}

/// How the previous frame's activations are cached during online inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheMode {
    /// Cache the previous frame's combined (post-NetWarp) representations.
    #[default]
    Recurrent,
    /// Cache the previous frame's plain single-image representations.
    TwoFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetWarpSpec {
    pub insertion_layers: Vec<String>,
    pub use_flowcnn: bool,
    pub epsilon: f64,
    pub cache_mode: CacheMode,
}

impl Default for NetWarpSpec {
    fn default() -> Self {
        NetWarpSpec {
            insertion_layers: vec!["conv3".into()],
            use_flowcnn: true,
            epsilon: warp::DEFAULT_EPSILON,
            cache_mode: CacheMode::Recurrent,
        }
    }
}

impl NetWarpSpec {
    /// No insertion points: the plain single-image network.
    pub fn baseline() -> Self {
        NetWarpSpec { insertion_layers: Vec::new(), ..Default::default() }
    }
}

/// Records `w1 * z_t + w2 * warp(z_prev, flow)` on the graph. `flow` must
/// already be at the activations' resolution.
pub fn netwarp_apply_var<T: Real>(
    g: &mut Graph<T>,
    z_t: Var,
    z_prev: Var,
    flow: Var,
    w1: Var,
    w2: Var,
    epsilon: f64,
) -> Result<Var> {
    let (st, sp, sf) = (g.shape(z_t), g.shape(z_prev), g.shape(flow));
    if st != sp {
        return Err(dim_err!("present activations {st} and previous activations {sp} differ"));
    }
    if sf.n != st.n || !sf.same_spatial(&st) {
        return Err(dim_err!("flow {sf} is not at the resolution of activations {st}"));
    }
    let warped = g.warp(z_prev, flow, epsilon)?;
    let a = g.scale_channels(z_t, w1)?;
    let b = g.scale_channels(warped, w2)?;
    g.add(a, b)
}

/// Tensor-level NetWarp combination.
pub fn netwarp_apply<T: Real>(
    z_t: &Tensor<T>,
    z_prev: &Tensor<T>,
    flow: &FlowField<T>,
    weights: &CombineWeights<T>,
    cfg: &WarpConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if weights.w1.len() != weights.w2.len() {
        return Err(dim_err!("w1 has {} channels, w2 has {}", weights.w1.len(), weights.w2.len()));
    }
    let mut g = Graph::new();
    let zt = g.constant(z_t.clone());
    let zp = g.constant(z_prev.clone());
    let f = g.constant(flow.tensor().clone());
    let w1 = g.constant(Tensor::vector(weights.w1.clone()));
    let w2 = g.constant(Tensor::vector(weights.w2.clone()));
    let out = netwarp_apply_var(&mut g, zt, zp, f, w1, w2, cfg.epsilon)?;
    Ok(g.value(out).clone())
}

/// A base network augmented with NetWarp modules.
#[derive(Clone, Debug)]
pub struct VideoSegModel {
    pub net: SegNet,
    pub spec: NetWarpSpec,
}

/// Per-layer activations of one frame.
pub type Activations<T> = IndexMap<String, Tensor<T>>;

impl VideoSegModel {
    pub fn new(net: SegNet, spec: NetWarpSpec) -> Result<Self> {
        for (i, layer) in spec.insertion_layers.iter().enumerate() {
            net.layer_index(layer)?;
            if spec.insertion_layers[..i].contains(layer) {
                return Err(Error::Config(format!("insertion layer {layer:?} listed twice")));
            }
        }
        WarpConfig { epsilon: spec.epsilon, flow_stride: 1 }.validate().map_err(|e| Error::Config(e.to_string()))?;
        let mut spec = spec;
        spec.insertion_layers.sort_by_key(|l| net.layer_index(l).unwrap_or(usize::MAX));
        Ok(VideoSegModel { net, spec })
    }

    pub fn uses_warping(&self) -> bool {
        !self.spec.insertion_layers.is_empty()
    }

    fn uses_flowcnn(&self) -> bool {
        self.uses_warping() && self.spec.use_flowcnn
    }

    fn layer_channels(&self, layer: &str) -> Result<usize> {
        let idx = self.net.layer_index(layer)?;
        let cfg = self.net.config();
        Ok(cfg.channels.get(idx).copied().unwrap_or(cfg.num_classes))
    }

    /// Fresh parameters: base network, flow CNN (if used) and identity combination weights.
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet<T>> {
        let mut ps = self.net.init_params(rng);
        self.add_netwarp_params(&mut ps, rng)?;
        Ok(ps)
    }

    /// Adds the NetWarp parameters to an existing base-network parameter set.
    pub fn add_netwarp_params<T: Real, R: Rng + ?Sized>(&self, ps: &mut ParamSet<T>, rng: &mut R) -> Result<()> {
        if self.uses_flowcnn() {
            flowcnn::init_params(ps, rng)?;
        }
        for layer in &self.spec.insertion_layers {
            let cw = CombineWeights::<T>::identity(self.layer_channels(layer)?);
            ps.insert(w1_name(layer), Tensor::vector(cw.w1));
            ps.insert(w2_name(layer), Tensor::vector(cw.w2));
        }
        Ok(())
    }

    /// Names and shapes of every parameter this model needs.
    pub fn param_shapes(&self) -> Result<Vec<(String, Shape)>> {
        let mut out = self.net.param_shapes();
        if self.uses_flowcnn() {
            for (name, cout, cin) in flowcnn::LAYERS {
                out.push((format!("flowcnn.{name}.w"), Shape::new(cout, cin, 3, 3)));
                out.push((format!("flowcnn.{name}.b"), Shape::new(1, cout, 1, 1)));
            }
        }
        for layer in &self.spec.insertion_layers {
            let c = self.layer_channels(layer)?;
            out.push((w1_name(layer), Shape::new(1, c, 1, 1)));
            out.push((w2_name(layer), Shape::new(1, c, 1, 1)));
        }
        Ok(out)
    }

    /// Checks that `ps` holds every parameter this model needs with the right sizes.
    pub fn validate_params<T: Real>(&self, ps: &ParamSet<T>) -> Result<()> {
        for (name, shape) in self.param_shapes()? {
            let have = ps.require(&name)?;
            if have.shape() != shape {
                return Err(Error::Config(format!("parameter {name} has shape {}, expected {shape}", have.shape())));
            }
        }
        Ok(())
    }

    pub fn combine_weights<T: Real>(&self, ps: &ParamSet<T>, layer: &str) -> Result<CombineWeights<T>> {
        Ok(CombineWeights { w1: ps.require(&w1_name(layer))?.data().to_vec(), w2: ps.require(&w2_name(layer))?.data().to_vec() })
    }

    /// The flow fed to the warps: the flow CNN output, or the raw flow for
    /// the ablation without the flow CNN.
    pub fn transformed_flow<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Bound,
        flow: Var,
        frame_t: Var,
        frame_prev: Var,
    ) -> Result<Var> {
        if !self.uses_flowcnn() {
            return Ok(flow);
        }
        let input = flowcnn::build_input_var(g, flow, frame_t, frame_prev)?;
        flowcnn::forward(g, params, input, flow)
    }

    /// Plain single-image forward; also returns the insertion-layer activations.
    pub fn single_frame_forward<T: Real>(&self, g: &mut Graph<T>, params: &Bound, frame: Var) -> Result<(Var, IndexMap<String, Var>)> {
        let s = g.shape(frame);
        let mut acts = IndexMap::new();
        let layers = &self.spec.insertion_layers;
        let last = self.net.layer_names().len() - 1;
        let logits = self.net.run_range(g, params, frame, 0, last, (s.h, s.w), &mut |_, name, v| {
            if layers.iter().any(|l| l == name) {
                acts.insert(name.to_string(), v);
            }
            Ok(v)
        })?;
        Ok((logits, acts))
    }

    /// Activations of the insertion layers only, stopping at the deepest one.
    fn insertion_activations<T: Real>(&self, g: &mut Graph<T>, params: &Bound, frame: Var) -> Result<IndexMap<String, Var>> {
        let s = g.shape(frame);
        let mut acts = IndexMap::new();
        let Some(deepest) = self.spec.insertion_layers.last() else { return Ok(acts) };
        let to = self.net.layer_index(deepest)?;
        let layers = &self.spec.insertion_layers;
        self.net.run_range(g, params, frame, 0, to, (s.h, s.w), &mut |_, name, v| {
            if layers.iter().any(|l| l == name) {
                acts.insert(name.to_string(), v);
            }
            Ok(v)
        })?;
        Ok(acts)
    }

    /// Forward of the present frame given previous-frame activations at every
    /// insertion layer. Returns logits and the combined activations.
    pub fn forward_with_previous<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Bound,
        frame_t: Var,
        prev_acts: &IndexMap<String, Var>,
        warp_flow: Var,
    ) -> Result<(Var, IndexMap<String, Var>)> {
        let s = g.shape(frame_t);
        let fs = g.shape(warp_flow);
        if fs.c != 2 || fs.n != s.n || !fs.same_spatial(&s) {
            return Err(dim_err!("flow {fs} does not match frame {s}"));
        }
        let mut combined = IndexMap::new();
        let last = self.net.layer_names().len() - 1;
        let epsilon = self.spec.epsilon;
        let logits = self.net.run_range(g, params, frame_t, 0, last, (s.h, s.w), &mut |g, name, z_t| {
            let Some(&z_prev) = prev_acts.get(name) else { return Ok(z_t) };
            let stride = self.net.layer_stride(name)?;
            let flow = g.subsample_flow(warp_flow, stride)?;
            let w1 = params.get(&w1_name(name))?;
            let w2 = params.get(&w2_name(name))?;
            let out = netwarp_apply_var(g, z_t, z_prev, flow, w1, w2, epsilon)?;
            combined.insert(name.to_string(), out);
            Ok(out)
        })?;
        Ok((logits, combined))
    }

    /// Two-frame training graph: both frames pass through the shared base
    /// network; the previous frame's insertion-layer activations are warped
    /// into the present frame's forward pass.
    pub fn two_frame_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Bound,
        frame_prev: Var,
        frame_t: Var,
        flow: Var,
    ) -> Result<Var> {
        let (sp, st) = (g.shape(frame_prev), g.shape(frame_t));
        if sp != st {
            return Err(dim_err!("previous frame {sp} and present frame {st} differ"));
        }
        if !self.uses_warping() {
            return Ok(self.single_frame_forward(g, params, frame_t)?.0);
        }
        let prev = self.insertion_activations(g, params, frame_prev)?;
        let warp_flow = self.transformed_flow(g, params, flow, frame_t, frame_prev)?;
        Ok(self.forward_with_previous(g, params, frame_t, &prev, warp_flow)?.0)
    }
}

/// Per-pixel argmax over classes (lowest class index wins ties).
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Vec<LabelMap> {
    let s = logits.shape();
    (0..s.n)
        .map(|n| {
            let data = (0..s.plane())
                .map(|p| {
                    let mut best = 0;
                    for c in 1..s.c {
                        if logits.data()[(n * s.c + c) * s.plane() + p] > logits.data()[(n * s.c + best) * s.plane() + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(s.h, s.w, data).expect("plane size")
        })
        .collect()
}

/// State carried between frames during online inference.
#[derive(Clone, Debug)]
pub struct FrameCache<T> {
    pub frame: Tensor<T>,
    pub activations: Activations<T>,
}

/// Online (causal) inference over a frame sequence.
pub struct VideoSession<'a, T> {
    model: &'a VideoSegModel,
    params: &'a ParamSet<T>,
    cache: Option<FrameCache<T>>,
}

fn bind_constants<T: Real>(params: &ParamSet<T>, g: &mut Graph<T>) -> Bound {
    let mut frozen = params.clone();
    frozen.set_frozen("", true);
    frozen.bind(g)
}

impl<'a, T: Real> VideoSession<'a, T> {
    pub fn new(model: &'a VideoSegModel, params: &'a ParamSet<T>) -> Result<Self> {
        model.validate_params(params)?;
        Ok(VideoSession { model, params, cache: None })
    }

    pub fn cache(&self) -> Option<&FrameCache<T>> {
        self.cache.as_ref()
    }

    /// Processes the next frame; `flow` is the reverse flow to the previous
    /// frame and is ignored for the first frame. Returns logits.
    pub fn step(&mut self, frame: &Tensor<T>, flow: Option<&FlowField<T>>) -> Result<Tensor<T>> {
        let model = self.model;
        let mut g = Graph::new();
        let params = bind_constants(self.params, &mut g);
        let x = g.constant(frame.clone());
        let (logits, acts) = match (&self.cache, model.uses_warping()) {
            (Some(prev), true) => {
                let flow = flow.ok_or_else(|| Error::Validation("frames after the first need a flow field".into()))?;
                let fp = g.constant(prev.frame.clone());
                let f = g.constant(flow.tensor().clone());
                let prev_acts: IndexMap<String, Var> =
                    prev.activations.iter().map(|(k, t)| (k.clone(), g.constant(t.clone()))).collect();
                let warp_flow = model.transformed_flow(&mut g, &params, f, x, fp)?;
                let (logits, combined) = model.forward_with_previous(&mut g, &params, x, &prev_acts, warp_flow)?;
                let acts = match model.spec.cache_mode {
                    CacheMode::Recurrent => combined,
                    CacheMode::TwoFrame => model.insertion_activations(&mut g, &params, x)?,
                };
                (logits, acts)
            }
            _ => model.single_frame_forward(&mut g, &params, x)?,
        };
        let activations = acts.into_iter().map(|(k, v)| (k, g.value(v).clone())).collect();
        self.cache = Some(FrameCache { frame: frame.clone(), activations });
        Ok(g.value(logits).clone())
    }
}

/// Runs online inference over a whole sequence. `flows[i]` is the reverse
/// flow from frame `i` to frame `i - 1`; `flows[0]` is ignored.
pub fn video_inference<T: Real>(
    model: &VideoSegModel,
    params: &ParamSet<T>,
    frames: &[Tensor<T>],
    flows: &[Option<FlowField<T>>],
) -> Result<Vec<LabelMap>> {
    if frames.len() != flows.len() {
        return Err(Error::Validation(format!("{} frames but {} flow entries", frames.len(), flows.len())));
    }
    let mut session = VideoSession::new(model, params)?;
    let mut out = Vec::with_capacity(frames.len());
    for (frame, flow) in frames.iter().zip(flows) {
        let logits = session.step(frame, flow.as_ref())?;
        out.extend(argmax_labels(&logits));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::SegNetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(layers: &[&str]) -> VideoSegModel {
        let spec = NetWarpSpec { insertion_layers: layers.iter().map(|s| s.to_string()).collect(), ..Default::default() };
        VideoSegModel::new(SegNet::new(SegNetConfig::default()).unwrap(), spec).unwrap()
    }

    #[test]
    fn unknown_layer_is_config_error() {
        let spec = NetWarpSpec { insertion_layers: vec!["fc6".into()], ..Default::default() };
        let err = VideoSegModel::new(SegNet::new(SegNetConfig::default()).unwrap(), spec).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn insertion_layers_sorted_by_depth() {
        let m = model(&["conv3", "conv1"]);
        assert_eq!(m.spec.insertion_layers, vec!["conv1", "conv3"]);
    }

    #[test]
    fn identity_weights_at_init() {
        let m = model(&["conv2"]);
        let ps = m.init_params::<f32, _>(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(ps.get("netwarp.conv2.w1").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(ps.get("netwarp.conv2.w2").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(ps.get("netwarp.conv2.w1").unwrap().len(), 32);
        m.validate_params(&ps).unwrap();
    }

    #[test]
    fn apply_rejects_flow_resolution_mismatch() {
        let z = Tensor::<f32>::zeros(Shape::new(1, 4, 4, 4));
        let err = netwarp_apply(&z, &z, &FlowField::zeros(1, 8, 8), &CombineWeights::identity(4), &WarpConfig::default());
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn sequence_length_mismatch() {
        let m = model(&["conv2"]);
        let ps = m.init_params::<f32, _>(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let frames = vec![Tensor::zeros(Shape::new(1, 3, 8, 8)); 2];
        assert!(video_inference(&m, &ps, &frames, &[None]).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 3, 1, 2), vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_labels(&t)[0].data(), &[0, 1]);
    }
}
