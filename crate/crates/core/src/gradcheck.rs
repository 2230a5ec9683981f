//! Finite-difference verification of every backward rule, in 64-bit.
//!
//! Each check builds a small graph from random inputs, projects its output
//! onto a fixed random direction and compares the analytic gradient of that
//! scalar with central differences. Perturbations that change a piecewise
//! decision (ReLU sign, pooling winner, warp cell or clamp) are skipped, as
//! the function is not differentiable across them.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flowcnn;
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::netwarp::{w1_name, w2_name, NetWarpSpec, VideoSegModel};
use crate::params::Bound;
use crate::segnet::{SegNet, SegNetConfig};
use crate::tape::{Graph, OpKind, Var};
use crate::tensor::{Shape, Tensor};
use crate::warp::DEFAULT_EPSILON;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seeds: usize,
    pub master_seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub end_to_end_tolerance: f64,
    /// Entries checked per input tensor; larger tensors are subsampled.
    pub max_entries: usize,
    pub end_to_end_entries: usize,
    /// Scales the backward output of one op kind, to prove the harness fails.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seeds: 20,
            master_seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            end_to_end_tolerance: 1e-3,
            max_entries: 64,
            end_to_end_entries: 3,
            fault: None,
        }
    }
}

/// Worst relative error of one check over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-5)`. Below the floor the comparison is
/// absolute; central differences at step 1e-5 carry round-off near 1e-10.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

struct Case<'a> {
    inputs: Vec<Tensor<f64>>,
    build: Box<Build<'a>>,
}

/// Projected output and activation pattern for one set of inputs.
fn eval(case: &Case<'_>, inputs: &[Tensor<f64>], proj: &Tensor<f64>) -> Result<(f64, u64)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let f = g.value(out).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum();
    Ok((f, g.activation_pattern()))
}

fn run_case(case: &Case<'_>, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng, report: &mut CheckReport) -> Result<()> {
    let mut g = Graph::new();
    if let Some(kind) = cfg.fault {
        g.inject_backward_fault(kind);
    }
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let shape = g.shape(out);
    let proj = Tensor::<f64>::randn(shape, 1.0, rng);
    let pattern = g.activation_pattern();
    g.backward_with(out, proj.clone())?;
    let analytic: Vec<Tensor<f64>> =
        vars.iter().zip(&case.inputs).map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();

    let h = cfg.step;
    for (j, input) in case.inputs.iter().enumerate() {
        let n = input.len();
        let limit = cfg.max_entries.min(n);
        let entries: Vec<usize> = if limit >= n { (0..n).collect() } else { sample(rng, n, limit).into_vec() };
        for k in entries {
            let mut plus = case.inputs.clone();
            plus[j].data_mut()[k] += h;
            let mut minus = case.inputs.clone();
            minus[j].data_mut()[k] -= h;
            let (fp, pp) = eval(case, &plus, &proj)?;
            let (fm, pm) = eval(case, &minus, &proj)?;
            if pp != pattern || pm != pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[j].data()[k], numeric);
            report.worst = report.worst.max(if err.is_nan() { f64::INFINITY } else { err });
            report.checked += 1;
        }
    }
    Ok(())
}

fn small(rng: &mut ChaCha8Rng, c: usize) -> Tensor<f64> {
    Tensor::randn(Shape::new(1, c, 5, 5), 1.0, rng)
}

fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> LabelMap {
    let data = (0..h * w).map(|_| if rng.random_bool(0.1) { IGNORE_LABEL } else { rng.random_range(0..classes) }).collect();
    LabelMap::new(h, w, data).expect("sized")
}

fn random_flow(rng: &mut ChaCha8Rng, h: usize, w: usize, integer: bool) -> Tensor<f64> {
    let mut f = Tensor::<f64>::rand_uniform(Shape::new(1, 2, h, w), -2.0, 2.0, rng);
    if integer {
        // Integer displacements, some far enough to be clamped at the border.
        for v in f.data_mut() {
            *v = (*v * 2.0).round();
        }
    }
    f
}

fn op_case(name: &str, seed: usize, rng: &mut ChaCha8Rng) -> Case<'static> {
    match name {
        "conv2d" => {
            let (padding, stride) = [(1, 1), (0, 1), (1, 2)][seed % 3];
            let inputs = vec![small(rng, 2), Tensor::randn(Shape::new(3, 2, 3, 3), 0.5, rng), Tensor::randn(Shape::new(1, 3, 1, 1), 0.5, rng)];
            Case { inputs, build: Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), padding, stride)) }
        }
        "relu" => Case { inputs: vec![small(rng, 2)], build: Box::new(|g, v| g.relu(v[0])) },
        "concat_channels" => Case {
            inputs: vec![small(rng, 2), small(rng, 1)],
            build: Box::new(|g, v| g.concat_channels(&[v[0], v[1]])),
        },
        "scale_per_channel" => Case {
            inputs: vec![small(rng, 2), Tensor::randn(Shape::new(1, 2, 1, 1), 1.0, rng)],
            build: Box::new(|g, v| g.scale_channels(v[0], v[1])),
        },
        "add" => Case { inputs: vec![small(rng, 2), small(rng, 2)], build: Box::new(|g, v| g.add(v[0], v[1])) },
        "sub" => Case { inputs: vec![small(rng, 2), small(rng, 2)], build: Box::new(|g, v| g.sub(v[0], v[1])) },
        "softmax_xent" => {
            let labels = random_labels(rng, 5, 5, 2);
            Case {
                inputs: vec![small(rng, 2).map(|v| 2.0 * v)],
                build: Box::new(move |g, v| g.softmax_xent(v[0], &[&labels], IGNORE_LABEL)),
            }
        }
        "maxpool2" => Case { inputs: vec![small(rng, 2)], build: Box::new(|g, v| g.maxpool2(v[0])) },
        "upsample_bilinear" => {
            Case { inputs: vec![small(rng, 2)], build: Box::new(|g, v| g.upsample_bilinear(v[0], 8, 9)) }
        }
        "warp" => {
            let flow = random_flow(rng, 5, 5, seed % 2 == 0);
            Case {
                inputs: vec![small(rng, 2), flow],
                build: Box::new(|g, v| g.warp(v[0], v[1], DEFAULT_EPSILON)),
            }
        }
        "subsample_flow" => Case {
            inputs: vec![random_flow(rng, 5, 5, false)],
            build: Box::new(|g, v| g.subsample_flow(v[0], 2)),
        },
        _ => unreachable!("unknown op check {name}"),
    }
}

pub const OP_CHECKS: [&str; 12] = [
    "conv2d",
    "relu",
    "concat_channels",
    "scale_per_channel",
    "add",
    "sub",
    "softmax_xent",
    "maxpool2",
    "upsample_bilinear",
    "warp",
    "subsample_flow",
    "flowcnn+warp",
];

/// Flow CNN on a random pair, its output driving a warp of random features.
fn flowcnn_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let mut inputs = vec![
        random_flow(rng, 5, 5, false),
        Tensor::rand_uniform(Shape::new(1, 3, 5, 5), 0.0, 1.0, rng),
        Tensor::rand_uniform(Shape::new(1, 3, 5, 5), 0.0, 1.0, rng),
        small(rng, 2),
    ];
    let mut names = Vec::new();
    for (name, cout, cin) in flowcnn::LAYERS {
        inputs.push(Tensor::randn(Shape::new(cout, cin, 3, 3), 0.3, rng));
        inputs.push(Tensor::randn(Shape::new(1, cout, 1, 1), 0.3, rng));
        names.push(format!("flowcnn.{name}.w"));
        names.push(format!("flowcnn.{name}.b"));
    }
    Case {
        inputs,
        build: Box::new(move |g, v| {
            let mut bound = Bound::default();
            for (name, &var) in names.iter().zip(&v[4..]) {
                bound.insert(name, var);
            }
            let input = flowcnn::build_input_var(g, v[0], v[1], v[2])?;
            let flow = flowcnn::forward(g, &bound, input, v[0])?;
            g.warp(v[3], flow, DEFAULT_EPSILON)
        }),
    }
}

/// Loss of the two-frame graph on a 1x3x16x16 pair with NetWarp at two
/// layers, differentiated with respect to every parameter tensor.
fn end_to_end_case(rng: &mut ChaCha8Rng) -> Result<Case<'static>> {
    let spec = NetWarpSpec { insertion_layers: vec!["conv2".into(), "conv3".into()], ..Default::default() };
    let model = VideoSegModel::new(SegNet::new(SegNetConfig::default())?, spec)?;
    let mut ps = model.init_params::<f64, _>(rng)?;
    for (name, _) in model.param_shapes()? {
        let t = ps.get_mut(&name).expect("initialized");
        if name.starts_with("flowcnn.") {
            *t = Tensor::randn(t.shape(), 0.2, rng);
        } else if name.ends_with(".w1") || name.ends_with(".w2") {
            *t = Tensor::rand_uniform(t.shape(), 0.3, 1.2, rng);
        } else if name.ends_with(".b") {
            *t = Tensor::randn(t.shape(), 0.1, rng);
        }
    }
    let names: Vec<String> = ps.names().map(str::to_owned).collect();
    let frame_prev = Tensor::rand_uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, rng);
    let frame_t = Tensor::rand_uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, rng);
    let flow = random_flow(rng, 16, 16, false);
    let labels = random_labels(rng, 16, 16, 3);
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| ps.get(n).expect("listed").clone()).collect();
    debug_assert!(names.contains(&w1_name("conv2")) && names.contains(&w2_name("conv3")));
    Ok(Case {
        inputs,
        build: Box::new(move |g, v| {
            let mut bound = Bound::default();
            for (name, &var) in names.iter().zip(v) {
                bound.insert(name, var);
            }
            let xp = g.constant(frame_prev.clone());
            let xt = g.constant(frame_t.clone());
            let f = g.constant(flow.clone());
            let logits = model.two_frame_forward(g, &bound, xp, xt, f)?;
            g.softmax_xent(logits, &[&labels], IGNORE_LABEL)
        }),
    })
}

fn seed_for(master: u64, check: usize, seed: usize) -> u64 {
    master.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((check as u64) << 32) ^ seed as u64
}

/// Runs every check over `cfg.seeds` seeds.
pub fn run(cfg: &GradcheckConfig) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for (ci, &name) in OP_CHECKS.iter().enumerate() {
        let mut rep = CheckReport { name, worst: 0.0, checked: 0, skipped: 0, tolerance: cfg.tolerance };
        for s in 0..cfg.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.master_seed, ci, s));
            let case = if name == "flowcnn+warp" { flowcnn_case(&mut rng) } else { op_case(name, s, &mut rng) };
            run_case(&case, cfg, &mut rng, &mut rep)?;
        }
        reports.push(rep);
    }
    let mut rep = CheckReport { name: "end_to_end", worst: 0.0, checked: 0, skipped: 0, tolerance: cfg.end_to_end_tolerance };
    let e2e_cfg = GradcheckConfig { max_entries: cfg.end_to_end_entries, ..cfg.clone() };
    for s in 0..cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.master_seed, OP_CHECKS.len(), s));
        let case = end_to_end_case(&mut rng)?;
        run_case(&case, &e2e_cfg, &mut rng, &mut rep)?;
    }
    reports.push(rep);
    Ok(reports)
}

pub fn format_reports(reports: &[CheckReport]) -> String {
    let mut out = format!("{:<20} {:>12} {:>8} {:>8} {:>10}  status\n", "check", "worst_rel", "checked", "skipped", "tolerance");
    for r in reports {
        out.push_str(&format!(
            "{:<20} {:>12.3e} {:>8} {:>8} {:>10.0e}  {}\n",
            r.name,
            r.worst,
            r.checked,
            r.skipped,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    out
}
