use netwarp::dataset::Sequence;
use netwarp::experiment::{compute_flows, initial_params, train, ExperimentConfig, FlowKind, Mode};
use netwarp::synth::{generate, SceneSpec, ShapeKind, ShapeSpec};
use netwarp::segnet::SegNetConfig;

fn moving_square() -> Sequence {
    let spec = SceneSpec {
        height: 24,
        width: 24,
        length: 12,
        num_classes: 2,
        seed: 3,
        noise_std: 0.02,
        texture_amplitude: 0.0,
        background_color: [0.3, 0.3, 0.3],
        shapes: vec![ShapeSpec {
            kind: ShapeKind::Rectangle,
            class: 1,
            center: [7.0, 9.0],
            size: [8.0, 8.0],
            velocity: [1.0, 0.5],
            color: [0.8, 0.6, 0.2],
            texture_seed: 1,
        }],
    };
    Sequence::from_scene("square", generate(&spec).unwrap(), 1)
}

fn config(steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { steps, ..Default::default() };
    cfg.segnet = SegNetConfig { in_channels: 3, channels: vec![8, 8, 8], num_classes: 2 };
    cfg.flow = FlowKind::GroundTruth;
    cfg.adam.lr = 1e-2;
    cfg
}

fn pixel_accuracy(cfg: &ExperimentConfig, mode: Mode, params: &netwarp::ParamSet<f32>, seq: &Sequence) -> f64 {
    let model = cfg.model(mode).unwrap();
    let flows = compute_flows(std::slice::from_ref(seq), cfg.flow, &cfg.block_match).unwrap();
    let preds = netwarp::netwarp::video_inference(&model, params, &seq.frames, &flows[0]).unwrap();
    let (mut hit, mut total) = (0usize, 0usize);
    for (pred, gt) in preds.iter().zip(&seq.labels) {
        let gt = gt.as_ref().unwrap();
        hit += pred.data().iter().zip(gt.data()).filter(|(a, b)| a == b).count();
        total += gt.data().len();
    }
    hit as f64 / total as f64
}

#[test]
fn baseline_learns_a_moving_square() {
    let seq = moving_square();
    let cfg = config(200);
    let model = cfg.model(Mode::Baseline).unwrap();
    let flows = compute_flows(std::slice::from_ref(&seq), cfg.flow, &cfg.block_match).unwrap();
    let out = train(&cfg, &model, initial_params(&model, 0, None).unwrap(), std::slice::from_ref(&seq), &flows, |_, _| {}).unwrap();
    let acc = pixel_accuracy(&cfg, Mode::Baseline, &out.params, &seq);
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn netwarp_loss_decreases() {
    let seq = moving_square();
    let cfg = config(150);
    let model = cfg.model(Mode::Netwarp).unwrap();
    let flows = compute_flows(std::slice::from_ref(&seq), cfg.flow, &cfg.block_match).unwrap();
    let out = train(&cfg, &model, initial_params(&model, 0, None).unwrap(), std::slice::from_ref(&seq), &flows, |_, _| {}).unwrap();
    let avg = |s: &[f32]| s.iter().sum::<f32>() / s.len() as f32;
    let (first, last) = (avg(&out.losses[..20]), avg(&out.losses[out.losses.len() - 20..]));
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    assert!(pixel_accuracy(&cfg, Mode::Netwarp, &out.params, &seq) >= 0.95);
}

#[test]
fn zero_steps_returns_the_initial_parameters() {
    let seq = moving_square();
    let cfg = config(0);
    let model = cfg.model(Mode::Netwarp).unwrap();
    let flows = compute_flows(std::slice::from_ref(&seq), cfg.flow, &cfg.block_match).unwrap();
    let init = initial_params(&model, 4, None).unwrap();
    let out = train(&cfg, &model, init.clone(), std::slice::from_ref(&seq), &flows, |_, _| {}).unwrap();
    assert!(out.losses.is_empty());
    for (name, t) in init.iter() {
        assert_eq!(out.params.get(name).unwrap(), t, "{name}");
    }
}

#[test]
fn frozen_base_stays_bit_identical() {
    let seq = moving_square();
    let mut cfg = config(30);
    cfg.freeze_base = true;
    let model = cfg.model(Mode::Netwarp).unwrap();
    let flows = compute_flows(std::slice::from_ref(&seq), cfg.flow, &cfg.block_match).unwrap();
    let init = initial_params(&model, 9, None).unwrap();
    let out = train(&cfg, &model, init.clone(), std::slice::from_ref(&seq), &flows, |_, _| {}).unwrap();
    let mut moved = 0;
    for (name, t) in init.iter() {
        if name.starts_with("segnet.") {
            assert_eq!(out.params.get(name).unwrap(), t, "{name}");
        } else if out.params.get(name).unwrap() != t {
            moved += 1;
        }
    }
    assert!(moved > 0, "NetWarp parameters did not train");
}

#[test]
fn same_seed_same_run() {
    let seq = moving_square();
    let cfg = config(20);
    let model = cfg.model(Mode::Netwarp).unwrap();
    let flows = compute_flows(std::slice::from_ref(&seq), cfg.flow, &cfg.block_match).unwrap();
    let run = || train(&cfg, &model, initial_params(&model, 1, None).unwrap(), std::slice::from_ref(&seq), &flows, |_, _| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.losses, b.losses);
    assert!(a.params.iter().all(|(n, t)| b.params.get(n).unwrap() == t));
}

#[test]
fn predictions_cover_every_frame() {
    let seq = moving_square();
    let cfg = config(0);
    let model = cfg.model(Mode::Netwarp).unwrap();
    let flows = compute_flows(std::slice::from_ref(&seq), cfg.flow, &cfg.block_match).unwrap();
    let preds = netwarp::netwarp::video_inference(&model, &initial_params(&model, 0, None).unwrap(), &seq.frames, &flows[0]).unwrap();
    assert_eq!(preds.len(), seq.len());
    assert_eq!((preds[0].height(), preds[0].width()), (24, 24));
}
