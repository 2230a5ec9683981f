use netwarp::metrics::{iou, trimap_iou, ConfusionMatrix};
use netwarp::tensor::{Shape, Tensor};
use netwarp::warp::{subsample_flow, warp, warp_backward, WarpConfig};
use netwarp::{FlowField, Graph, LabelMap, ParamSet};
use proptest::prelude::*;

fn tensor(shape: Shape) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, shape.numel()).prop_map(move |d| Tensor::from_vec(shape, d).unwrap())
}

fn small_shape() -> impl Strategy<Value = Shape> {
    (1usize..=4, 1usize..=8, 1usize..=8).prop_map(|(c, h, w)| Shape::new(1, c, h, w))
}

fn features_and_flow() -> impl Strategy<Value = (Tensor<f64>, FlowField<f64>)> {
    small_shape().prop_flat_map(|s| {
        let lim = s.h as f64;
        (
            tensor(s),
            prop::collection::vec(-lim..lim, 2 * s.plane())
                .prop_map(move |d| FlowField::new(Tensor::from_vec(Shape::new(1, 2, s.h, s.w), d).unwrap()).unwrap()),
        )
    })
}

fn label_pair(classes: u8) -> impl Strategy<Value = (LabelMap, LabelMap)> {
    (1usize..=6, 1usize..=6).prop_flat_map(move |(h, w)| {
        let map = prop::collection::vec(0..classes, h * w).prop_map(move |d| LabelMap::new(h, w, d).unwrap());
        (map.clone(), map)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn warp_is_a_convex_combination((f, flow) in features_and_flow()) {
        let out = warp(&f, &flow, &WarpConfig::default()).unwrap();
        let s = f.shape();
        for c in 0..s.c {
            let plane = f.plane(0, c);
            let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in out.plane(0, c) {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn warp_gradients_vanish_for_zero_upstream((f, flow) in features_and_flow()) {
        let (gf, gw) = warp_backward(&Tensor::zeros(f.shape()), &f, &flow, &WarpConfig::default()).unwrap();
        prop_assert!(gf.data().iter().all(|&v| v == 0.0));
        prop_assert!(gw.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_features_give_zero_flow_gradient((f, flow) in features_and_flow(), k in -3.0f64..3.0) {
        let flat = Tensor::full(f.shape(), k);
        let (_, gw) = warp_backward(&f, &flat, &flow, &WarpConfig::default()).unwrap();
        prop_assert!(gw.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn subsampled_dims_round_up(h in 1usize..20, w in 1usize..20, stride in 1usize..6) {
        let sub = subsample_flow(&FlowField::<f32>::uniform(1, h, w, 3.0, -6.0), stride).unwrap();
        prop_assert_eq!((sub.height(), sub.width()), (h.div_ceil(stride), w.div_ceil(stride)));
        prop_assert!(sub.tensor().plane(0, 0).iter().all(|&u| u == 3.0 / stride as f32));
    }

    #[test]
    fn add_commutes_bitwise(a in tensor(Shape::new(1, 2, 3, 4)), b in tensor(Shape::new(1, 2, 3, 4))) {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let (ab, ba) = (g.add(va, vb).unwrap(), g.add(vb, va).unwrap());
        prop_assert_eq!(g.value(ab), g.value(ba));
    }

    #[test]
    fn nwt1_round_trip(t in small_shape().prop_flat_map(tensor)) {
        let t = t.cast::<f32>();
        let back = Tensor::<f32>::read_from(&mut t.to_bytes().as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn flo_round_trip((_, flow) in features_and_flow()) {
        let flow = flow.cast::<f32>();
        prop_assert_eq!(FlowField::<f32>::from_flo_bytes(&flow.to_flo_bytes().unwrap()).unwrap(), flow);
    }

    #[test]
    fn pgm_round_trip((map, _) in label_pair(255)) {
        let mut bytes = Vec::new();
        map.write_pgm(&mut bytes).unwrap();
        prop_assert_eq!(LabelMap::read_pgm(&mut bytes.as_slice()).unwrap(), map);
    }

    #[test]
    fn archive_round_trip(ts in prop::collection::vec(small_shape().prop_flat_map(tensor), 1..4)) {
        let mut ps = ParamSet::<f32>::new();
        for (i, t) in ts.iter().enumerate() {
            ps.insert(format!("p{i}"), t.cast());
        }
        let mut bytes = Vec::new();
        ps.write_archive(&mut bytes).unwrap();
        let back = ParamSet::<f32>::read_archive(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(back.names().collect::<Vec<_>>(), ps.names().collect::<Vec<_>>());
        for (name, t) in ps.iter() {
            prop_assert_eq!(back.get(name).unwrap(), t);
        }
    }

    #[test]
    fn scores_lie_in_unit_interval((pred, gt) in label_pair(3)) {
        let mut c = ConfusionMatrix::new(3);
        c.add(&pred, &gt).unwrap();
        for s in iou(&c).per_class.into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn metrics_follow_class_relabeling((pred, gt) in label_pair(3), perm in Just([0u8, 1, 2]).prop_shuffle()) {
        let relabel = |m: &LabelMap| LabelMap::new(m.height(), m.width(), m.data().iter().map(|&l| perm[l as usize]).collect()).unwrap();
        let (mut a, mut b) = (ConfusionMatrix::new(3), ConfusionMatrix::new(3));
        a.add(&pred, &gt).unwrap();
        b.add(&relabel(&pred), &relabel(&gt)).unwrap();
        let (sa, sb) = (iou(&a), iou(&b));
        for c in 0..3 {
            prop_assert_eq!(sa.per_class[c], sb.per_class[perm[c] as usize]);
        }
        let (ta, tb) = (trimap_iou(&pred, &gt, 1, 3).unwrap(), trimap_iou(&relabel(&pred), &relabel(&gt), 1, 3).unwrap());
        for c in 0..3 {
            prop_assert_eq!(ta.per_class[c], tb.per_class[perm[c] as usize]);
        }
    }

    #[test]
    fn band_wider_than_the_map_is_plain_iou((pred, gt) in label_pair(3)) {
        let t = trimap_iou(&pred, &gt, 6, 3).unwrap();
        if t.defined {
            let mut c = ConfusionMatrix::new(3);
            c.add(&pred, &gt).unwrap();
            prop_assert_eq!(t, iou(&c));
        }
    }

    #[test]
    fn streaming_accumulation_is_additive(frames in prop::collection::vec(label_pair(3), 1..5)) {
        let mut total = ConfusionMatrix::new(3);
        let mut merged = ConfusionMatrix::new(3);
        for (p, g) in &frames {
            total.add(p, g).unwrap();
            let mut one = ConfusionMatrix::new(3);
            one.add(p, g).unwrap();
            merged.merge(&one).unwrap();
        }
        prop_assert_eq!(&total, &merged);
        prop_assert_eq!(total.total(), frames.iter().map(|(p, _)| p.data().len() as u64).sum::<u64>());
    }
}
