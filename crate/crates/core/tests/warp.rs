mod common;

use common::{naive_warp, random_case};
use netwarp::tensor::{Shape, Tensor};
use netwarp::warp::{subsample_flow, warp, warp_backward, WarpConfig};
use netwarp::FlowField;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn bitwise_equal_to_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = WarpConfig::default();
    for case in 0..100 {
        let integer = case % 3 == 0;
        let (f, flow) = random_case::<f32>(&mut rng, integer);
        let got = warp(&f, &flow, &cfg).unwrap();
        let want = naive_warp(&f, &flow, cfg.epsilon as f32);
        assert_eq!(got.data(), want.data(), "f32 case {case}");
        let (f, flow) = random_case::<f64>(&mut rng, integer);
        let got = warp(&f, &flow, &cfg).unwrap();
        assert_eq!(got.data(), naive_warp(&f, &flow, cfg.epsilon).data(), "f64 case {case}");
    }
}

#[test]
fn oracle_on_1x3x5x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f = Tensor::<f64>::rand_uniform(Shape::new(1, 3, 5, 5), 0.0, 1.0, &mut rng);
    let flow = FlowField::new(Tensor::rand_uniform(Shape::new(1, 2, 5, 5), -2.0, 2.0, &mut rng)).unwrap();
    assert_eq!(warp(&f, &flow, &WarpConfig::default()).unwrap(), naive_warp(&f, &flow, 1e-4));
}

#[test]
fn unit_translation_shifts_features() {
    // Only pixels whose shifted sample stays inside the map are compared.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = Tensor::<f64>::rand_uniform(Shape::new(1, 2, 6, 6), 0.0, 1.0, &mut rng);
    let out = warp(&f, &FlowField::uniform(1, 6, 6, 1.0, 0.0), &WarpConfig::default()).unwrap();
    for c in 0..2 {
        for y in 0..5 {
            for x in 0..4 {
                let adj = (f.at(0, c, y, x + 1) - f.at(0, c, y, x + 2))
                    .abs()
                    .max((f.at(0, c, y, x + 1) - f.at(0, c, y + 1, x + 1)).abs());
                let bound = 2.0 * 1e-4 * adj.max(1e-12) + 1e-12;
                assert!((out.at(0, c, y, x) - f.at(0, c, y, x + 1)).abs() <= bound);
            }
        }
    }
}

#[test]
fn feature_gradient_conserves_mass_without_clamping() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = Tensor::<f64>::rand_uniform(Shape::new(1, 2, 7, 7), -1.0, 1.0, &mut rng);
    let mut flow = FlowField::<f64>::zeros(1, 7, 7);
    for y in 0..7 {
        for x in 0..7 {
            // keep every sample point inside [0, 6)
            let u = rng.random_range(-(x as f64)..(5.9 - x as f64));
            let v = rng.random_range(-(y as f64)..(5.9 - y as f64));
            flow.set(0, y, x, u, v);
        }
    }
    let up = Tensor::<f64>::rand_uniform(f.shape(), -1.0, 1.0, &mut rng);
    let (gf, _) = warp_backward(&up, &f, &flow, &WarpConfig::default()).unwrap();
    assert!((gf.sum() - up.sum()).abs() < 1e-12);
}

#[test]
fn subsample_uniform_flow() {
    let flow = FlowField::<f32>::uniform(1, 4, 4, 2.0, 2.0);
    let sub = subsample_flow(&flow, 2).unwrap();
    assert_eq!(sub.shape(), Shape::new(1, 2, 2, 2));
    assert!(sub.tensor().data().iter().all(|&v| v == 1.0));
    assert_eq!(subsample_flow(&flow, 1).unwrap(), flow);
    assert_eq!(subsample_flow(&flow, 4).unwrap().shape(), Shape::new(1, 2, 1, 1));
}

#[test]
fn subsampled_flow_commutes_with_pooling_on_a_ramp() {
    // On a linear ramp, warping the full-resolution map then taking every
    // second pixel equals warping the subsampled map with the subsampled flow.
    let (h, w) = (8, 8);
    let full = Tensor::<f64>::from_vec(
        Shape::new(1, 1, h, w),
        (0..h * w).map(|p| 0.5 * (p % w) as f64 + 0.25 * (p / w) as f64).collect(),
    )
    .unwrap();
    let flow = FlowField::uniform(1, h, w, 2.0, 2.0);
    let warped = warp(&full, &flow, &WarpConfig::default()).unwrap();
    let coarse = Tensor::from_vec(Shape::new(1, 1, 4, 4), (0..16).map(|p| full.at(0, 0, 2 * (p / 4), 2 * (p % 4))).collect()).unwrap();
    let coarse_warped = warp(&coarse, &subsample_flow(&flow, 2).unwrap(), &WarpConfig::default()).unwrap();
    for y in 0..3 {
        for x in 0..3 {
            // the coarse grid adds its epsilon in coarse pixels, hence the tolerance
            assert!((warped.at(0, 0, 2 * y, 2 * x) - coarse_warped.at(0, 0, y, x)).abs() < 1e-3);
        }
    }
}
