//! Wall-clock timing of the warp forward and forward+backward passes.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::flow::FlowField;
use crate::tensor::{Shape, Tensor};
use crate::warp::{warp, warp_backward, WarpConfig};

/// Reported GPU time for warping a 1024-channel 128x128 representation.
/// Printed for context only; CPU timings are not comparable.
pub const GPU_REFERENCE_MS: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub shape: Shape,
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { shape: Shape::new(1, 1024, 128, 128), iters: 50, warmup: 2, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub op: &'static str,
    pub shape: Shape,
    pub iters: usize,
    pub threads: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn time(cfg: &BenchConfig, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    for _ in 0..cfg.warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    samples.sort_by(f64::total_cmp);
    Ok((median(&samples), percentile(&samples, 0.95)))
}

/// Times the 32-bit warp on random features and flow in `[-4, 4]`.
pub fn run(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.iters == 0 || cfg.shape.numel() == 0 {
        return Err(invalid!("benchmark needs a non-empty shape and at least one iteration"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.shape;
    let features = Tensor::<f32>::rand_uniform(s, 0.0, 1.0, &mut rng);
    let flow = FlowField::new(Tensor::rand_uniform(Shape::new(s.n, 2, s.h, s.w), -4.0, 4.0, &mut rng))?;
    let upstream = Tensor::<f32>::rand_uniform(s, -1.0, 1.0, &mut rng);
    let wc = WarpConfig::default();
    let threads = rayon::current_num_threads();

    let (fwd_med, fwd_p95) = time(cfg, || warp(&features, &flow, &wc).map(drop))?;
    let (fb_med, fb_p95) = time(cfg, || {
        let out = warp(&features, &flow, &wc)?;
        std::hint::black_box(&out);
        warp_backward(&upstream, &features, &flow, &wc).map(drop)
    })?;
    Ok(vec![
        BenchRow { op: "warp_forward", shape: s, iters: cfg.iters, threads, median_ms: fwd_med, p95_ms: fwd_p95 },
        BenchRow { op: "warp_forward_backward", shape: s, iters: cfg.iters, threads, median_ms: fb_med, p95_ms: fb_p95 },
    ])
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("op,n,c,h,w,iters,threads,median_ms,p95_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.6},{:.6}\n",
            r.op, r.shape.n, r.shape.c, r.shape.h, r.shape.w, r.iters, r.threads, r.median_ms, r.p95_ms
        ));
    }
    out
}
