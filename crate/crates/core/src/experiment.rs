//! Config-driven training and evaluation on synthetic video.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset, DatasetSpec, Sequence};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::flow_source::{block_match_flow, BlockMatchParams};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::metrics::{class_average_sizes, Evaluator, MetricsReport, ReportRow};
use crate::netwarp::{self, NetWarpSpec, VideoSegModel};
use crate::params::{Adam, AdamConfig, ParamSet};
use crate::segnet::{SegNet, SegNetConfig};
use crate::tape::Graph;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowKind {
    #[default]
    BlockMatch,
    GroundTruth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Baseline,
    Netwarp,
    NetwarpNoflowcnn,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Netwarp, Mode::NetwarpNoflowcnn];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Netwarp => "netwarp",
            Mode::NetwarpNoflowcnn => "netwarp-noflowcnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}; expected baseline, netwarp or netwarp-noflowcnn")))
    }

    /// The NetWarp configuration this mode trains, derived from `spec`.
    pub fn apply(self, spec: &NetWarpSpec) -> NetWarpSpec {
        match self {
            Mode::Baseline => NetWarpSpec { insertion_layers: Vec::new(), ..spec.clone() },
            Mode::Netwarp => NetWarpSpec { use_flowcnn: true, ..spec.clone() },
            Mode::NetwarpNoflowcnn => NetWarpSpec { use_flowcnn: false, ..spec.clone() },
        }
    }
}

/// Experiment file schema. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Dataset root, relative to the config file.
    pub dataset: PathBuf,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub band_px: usize,
    pub flow: FlowKind,
    pub block_match: BlockMatchParams,
    /// Keep base-network weights fixed while training.
    pub freeze_base: bool,
    /// Checkpoint providing initial base-network weights.
    pub init_checkpoint: Option<PathBuf>,
    pub segnet: SegNetConfig,
    pub netwarp: NetWarpSpec,
    pub adam: AdamConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: PathBuf::from("data"),
            seed: 0,
            steps: 2000,
            batch_size: 1,
            band_px: 2,
            flow: FlowKind::BlockMatch,
            block_match: BlockMatchParams::default(),
            freeze_base: false,
            init_checkpoint: None,
            segnet: SegNetConfig::default(),
            netwarp: NetWarpSpec::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset = base.join(&cfg.dataset);
        if let Some(p) = &cfg.init_checkpoint {
            cfg.init_checkpoint = Some(base.join(p));
        }
        Ok(cfg)
    }

    pub fn model(&self, mode: Mode) -> Result<VideoSegModel> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.band_px == 0 {
            return Err(Error::Config("band_px must be at least 1".into()));
        }
        VideoSegModel::new(SegNet::new(self.segnet.clone())?, mode.apply(&self.netwarp))
    }
}

pub fn load_dataset_spec(path: &Path) -> Result<DatasetSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Reverse flow for every frame of every sequence (`None` for frame 0).
pub type Flows = Vec<Vec<Option<FlowField<f32>>>>;

pub fn compute_flows(seqs: &[Sequence], kind: FlowKind, params: &BlockMatchParams) -> Result<Flows> {
    seqs.iter()
        .map(|s| {
            (0..s.len())
                .map(|t| match (t, kind) {
                    (0, _) => Ok(None),
                    (_, FlowKind::GroundTruth) => s.gt_flow[t]
                        .clone()
                        .map(Some)
                        .ok_or_else(|| Error::Format(format!("{}: frame {t} has no ground-truth flow", s.name))),
                    (_, FlowKind::BlockMatch) => block_match_flow(&s.frames[t], &s.frames[t - 1], params).map(Some),
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet<f32>,
    pub losses: Vec<f32>,
}

/// Fresh parameters for `model`, optionally taking base weights from `init`.
pub fn initial_params(model: &VideoSegModel, seed: u64, init: Option<&ParamSet<f32>>) -> Result<ParamSet<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = model.init_params::<f32, _>(&mut rng)?;
    if let Some(init) = init {
        for (name, shape) in model.net.param_shapes() {
            let t = init.require(&name)?;
            if t.shape() != shape {
                return Err(Error::Config(format!("initial {name} has shape {}, expected {shape}", t.shape())));
            }
            ps.insert(name, t.clone());
        }
    }
    Ok(ps)
}

/// Two-frame training on `(t - 1, t)` pairs whose frame `t` is labelled.
/// The pair order depends only on `cfg.seed`, so every mode sees the same data.
pub fn train(
    cfg: &ExperimentConfig,
    model: &VideoSegModel,
    mut params: ParamSet<f32>,
    data: &[Sequence],
    flows: &Flows,
    mut on_step: impl FnMut(usize, f32),
) -> Result<TrainOutcome> {
    model.validate_params(&params)?;
    let pairs: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (1..s.len()).filter(move |&t| s.labels[t].is_some()).map(move |t| (i, t)))
        .collect();
    if pairs.is_empty() && cfg.steps > 0 {
        return Err(Error::Config("no labelled frame with a predecessor to train on".into()));
    }
    if cfg.freeze_base {
        params.set_frozen("segnet.", true);
    }
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5a3b_1e00_0001);
    let mut adam = Adam::new(cfg.adam);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<(usize, usize)> = (0..cfg.batch_size).map(|_| pairs[sampler.random_range(0..pairs.len())]).collect();
        let prev: Vec<&Tensor<f32>> = batch.iter().map(|&(i, t)| &data[i].frames[t - 1]).collect();
        let cur: Vec<&Tensor<f32>> = batch.iter().map(|&(i, t)| &data[i].frames[t]).collect();
        let flow: Vec<&Tensor<f32>> =
            batch.iter().map(|&(i, t)| flows[i][t].as_ref().expect("frames >= 1 have flow").tensor()).collect();
        let (prev, cur, flow) = (Tensor::stack_batch(&prev)?, Tensor::stack_batch(&cur)?, Tensor::stack_batch(&flow)?);
        let labels: Vec<&LabelMap> = batch.iter().map(|&(i, t)| data[i].labels[t].as_ref().expect("sampled labelled")).collect();

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let (xp, xt, f) = (g.constant(prev), g.constant(cur), g.constant(flow));
        let logits = model.two_frame_forward(&mut g, &bound, xp, xt, f)?;
        let loss = g.softmax_xent(logits, &labels, IGNORE_LABEL)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        g.backward(loss)?;
        params.collect_grads(&g, &bound);
        adam.step(&mut params);
        params.zero_grads();
        losses.push(value);
        on_step(step, value);
    }
    params.set_frozen("", false);
    Ok(TrainOutcome { params, losses })
}

/// Online inference over `seqs` and every metric.
pub fn evaluate(
    model: &VideoSegModel,
    params: &ParamSet<f32>,
    data: &Dataset,
    flows: &Flows,
    band_px: usize,
    name: &str,
) -> Result<ReportRow> {
    let head = params.require("segnet.head.b")?.len();
    if head != data.num_classes {
        return Err(Error::Config(format!("checkpoint predicts {head} classes, dataset has {}", data.num_classes)));
    }
    let avg = class_average_sizes(
        data.test.iter().flat_map(|s| s.labels.iter().zip(&s.instances).filter_map(|(l, i)| Some((l.as_ref()?, i.as_ref()?)))),
        data.num_classes,
    )?;
    let mut ev = Evaluator::new(data.num_classes, band_px, &data.instance_classes, avg)?;
    for (s, f) in data.test.iter().zip(flows) {
        let preds = netwarp::video_inference(model, params, &s.frames, f)?;
        for (t, pred) in preds.iter().enumerate() {
            if let (Some(gt), Some(inst)) = (&s.labels[t], &s.instances[t]) {
                ev.add(pred, gt, inst)?;
            }
        }
    }
    Ok(ev.finish(name))
}

pub fn class_names(classes: usize) -> Vec<String> {
    const NAMES: [&str; 3] = ["background", "blob", "thin_bar"];
    (0..classes).map(|c| NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())).collect()
}

/// Reads a checkpoint and works out which NetWarp configuration it holds.
pub fn load_checkpoint(path: &Path, cfg: &ExperimentConfig) -> Result<(Mode, VideoSegModel, ParamSet<f32>)> {
    let mut f = fs::File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let params = ParamSet::<f32>::read_archive(&mut std::io::BufReader::new(&mut f))?;
    let mut layers: Vec<String> = params
        .names()
        .filter_map(|n| n.strip_prefix("netwarp.").and_then(|r| r.strip_suffix(".w1")).map(str::to_owned))
        .collect();
    layers.dedup();
    let use_flowcnn = params.contains("flowcnn.conv1.w");
    let mode = match (layers.is_empty(), use_flowcnn) {
        (true, _) => Mode::Baseline,
        (false, true) => Mode::Netwarp,
        (false, false) => Mode::NetwarpNoflowcnn,
    };
    let spec = NetWarpSpec { insertion_layers: layers, use_flowcnn, ..cfg.netwarp.clone() };
    let model = VideoSegModel::new(SegNet::new(cfg.segnet.clone())?, spec)?;
    model.validate_params(&params)?;
    Ok((mode, model, params))
}

pub fn save_checkpoint(path: &Path, params: &ParamSet<f32>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    params.write_archive(&mut out)?;
    std::io::Write::flush(&mut out)?;
    Ok(())
}

pub fn loss_csv(losses: &[f32]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

/// The single-image network of a checkpoint, with all NetWarp parts removed.
pub fn baseline_of(model: &VideoSegModel, params: &ParamSet<f32>) -> Result<(VideoSegModel, ParamSet<f32>)> {
    let base = VideoSegModel::new(model.net.clone(), NetWarpSpec::baseline())?;
    let mut ps = ParamSet::new();
    for (name, _) in base.param_shapes()? {
        ps.insert(name.clone(), params.require(&name)?.clone());
    }
    Ok((base, ps))
}

/// Evaluates checkpoints side by side. When none of them is a baseline, the
/// first one's base network evaluated frame by frame provides that row.
pub fn evaluate_checkpoints(
    cfg: &ExperimentConfig,
    data: &Dataset,
    flows: &Flows,
    checkpoints: &[(String, VideoSegModel, ParamSet<f32>)],
) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    if let Some((_, model, params)) = checkpoints.first() {
        if checkpoints.iter().all(|(_, m, _)| m.uses_warping()) {
            let (base, ps) = baseline_of(model, params)?;
            rows.push(evaluate(&base, &ps, data, flows, cfg.band_px, Mode::Baseline.name())?);
        }
    }
    for (name, model, params) in checkpoints {
        rows.push(evaluate(model, params, data, flows, cfg.band_px, name)?);
    }
    Ok(MetricsReport { class_names: class_names(data.num_classes), band_px: cfg.band_px, rows })
}

/// Loads the dataset named by `cfg` and the flows of one split (the other is left empty).
pub fn prepare_split(cfg: &ExperimentConfig, train_split: bool) -> Result<(Dataset, Flows, Flows)> {
    let data = dataset::load(&cfg.dataset)?;
    if data.num_classes != cfg.segnet.num_classes {
        return Err(Error::Config(format!(
            "network predicts {} classes, dataset has {}",
            cfg.segnet.num_classes, data.num_classes
        )));
    }
    if train_split {
        let train = compute_flows(&data.train, cfg.flow, &cfg.block_match)?;
        Ok((data, train, Vec::new()))
    } else {
        let test = compute_flows(&data.test, cfg.flow, &cfg.block_match)?;
        Ok((data, Vec::new(), test))
    }
}

/// `gen`: writes the dataset described by the spec file at `spec_path`.
pub fn cmd_gen(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<Dataset> {
    let mut spec = load_dataset_spec(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = dataset::build(&spec)?;
    dataset::save(&data, out)?;
    Ok(data)
}

/// `train`: trains `mode` and writes `checkpoint.nwa` and `loss.csv` into `out`.
pub fn cmd_train(cfg: &ExperimentConfig, mode: Mode, out: &Path, on_step: impl FnMut(usize, f32)) -> Result<TrainOutcome> {
    let model = cfg.model(mode)?;
    let init = match &cfg.init_checkpoint {
        Some(p) => Some(load_checkpoint(p, cfg)?.2),
        None => None,
    };
    let (data, train_flows, _) = prepare_split(cfg, true)?;
    let params = initial_params(&model, cfg.seed, init.as_ref())?;
    let outcome = train(cfg, &model, params, &data.train, &train_flows, on_step)?;
    fs::create_dir_all(out)?;
    save_checkpoint(&out.join("checkpoint.nwa"), &outcome.params)?;
    fs::write(out.join("loss.csv"), loss_csv(&outcome.losses))?;
    Ok(outcome)
}

/// `eval`: evaluates checkpoints on the test split.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<MetricsReport> {
    if checkpoints.is_empty() {
        return Err(Error::Config("eval needs at least one checkpoint".into()));
    }
    let loaded = checkpoints
        .iter()
        .map(|p| load_checkpoint(p, cfg).map(|(mode, model, ps)| (mode.name().to_string(), model, ps)))
        .collect::<Result<Vec<_>>>()?;
    let (data, _, test_flows) = prepare_split(cfg, false)?;
    evaluate_checkpoints(cfg, &data, &test_flows, &loaded)
}
