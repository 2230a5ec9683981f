//! Deterministic synthetic video: textured shapes translating over a static
//! textured background, with per-pixel classes, instance ids, ground-truth
//! reverse flow and occlusion masks.
//!
//! Shapes move rigidly. A shape that would leave the canvas has the offending
//! velocity component flipped before it moves, so every shape stays fully
//! visible on the canvas. Pixel ownership is decided at pixel centres; later
//! shapes in the list are drawn on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::FlowField;
use crate::labels::LabelMap;
use crate::tensor::{Shape, Tensor};
use crate::warp::{self, DEFAULT_EPSILON};

pub const BACKGROUND_CLASS: u8 = 0;
/// Largest per-frame speed along either axis; matches the default block-matching radius.
pub const MAX_SPEED: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Disc,
    ThinBar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub class: u8,
    /// Centre `(x, y)` in frame 0, pixels.
    pub center: [f64; 2],
    /// Full extents `(width, height)`; a disc uses `size[0]` as its diameter.
    pub size: [f64; 2],
    /// Pixels per frame, `(x, y)`.
    pub velocity: [f64; 2],
    pub color: [f32; 3],
    pub texture_seed: u64,
}

impl ShapeSpec {
    fn half_extents(&self) -> (f64, f64) {
        match self.kind {
            ShapeKind::Disc => (self.size[0] / 2.0, self.size[0] / 2.0),
            _ => (self.size[0] / 2.0, self.size[1] / 2.0),
        }
    }

    fn covers(&self, center: [f64; 2], x: f64, y: f64) -> bool {
        let (hx, hy) = self.half_extents();
        let (dx, dy) = (x - center[0], y - center[1]);
        match self.kind {
            ShapeKind::Disc => dx * dx + dy * dy <= hx * hx,
            _ => dx >= -hx && dx < hx && dy >= -hy && dy < hy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub length: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Std of the independent per-frame Gaussian pixel noise.
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default = "default_texture_amplitude")]
    pub texture_amplitude: f32,
    pub background_color: [f32; 3],
    pub shapes: Vec<ShapeSpec>,
}

fn default_texture_amplitude() -> f32 {
    0.4
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.length == 0 {
            return Err(invalid!("empty scene {}x{} with {} frames", self.height, self.width, self.length));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(invalid!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if self.shapes.len() > 254 {
            return Err(invalid!("at most 254 shapes, got {}", self.shapes.len()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(invalid!("noise_std must be non-negative"));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if s.class as usize >= self.num_classes || s.class == BACKGROUND_CLASS {
                return Err(invalid!("shape {i}: class {} must be in 1..{}", s.class, self.num_classes));
            }
            if s.size.iter().any(|&v| !(v > 0.0)) {
                return Err(invalid!("shape {i}: non-positive size {:?}", s.size));
            }
            if s.kind == ShapeKind::ThinBar && !(1.0..=3.0).contains(&s.size[0].min(s.size[1])) {
                return Err(invalid!("shape {i}: thin bar width must be in [1, 3], got {}", s.size[0].min(s.size[1])));
            }
            let (hx, hy) = s.half_extents();
            if 2.0 * hx > self.width as f64 || 2.0 * hy > self.height as f64 {
                return Err(invalid!("shape {i}: size {:?} larger than the {}x{} canvas", s.size, self.height, self.width));
            }
            if s.velocity.iter().any(|v| !(v.abs() <= MAX_SPEED)) {
                return Err(invalid!("shape {i}: speed {:?} exceeds {MAX_SPEED} px/frame", s.velocity));
            }
            let [cx, cy] = s.center;
            if cx - hx < 0.0 || cx + hx > self.width as f64 || cy - hy < 0.0 || cy + hy > self.height as f64 {
                return Err(invalid!("shape {i}: does not start fully inside the canvas"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub num_classes: usize,
    pub frames: Vec<Tensor<f32>>,
    pub labels: Vec<LabelMap>,
    /// 0 for background, `i + 1` for shape `i`.
    pub instances: Vec<LabelMap>,
    /// Reverse flow from frame `t` to `t - 1`; `None` for frame 0.
    pub gt_flow: Vec<Option<FlowField<f32>>>,
    /// 1 where the ground-truth correspondence is not certified; `None` for frame 0.
    pub occlusion: Vec<Option<LabelMap>>,
    /// Centre of every shape in every frame.
    pub positions: Vec<Vec<[f64; 2]>>,
}

impl SceneSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Smoothed uniform noise, `h x w`, values in `[0, 1]`.
fn texture(h: usize, w: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f32> = (0..h * w).map(|_| rng.random::<f32>()).collect();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0f32, 0.0f32);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += raw[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = s / n;
        }
    }
    out
}

fn sample_texture(tex: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x1, y1) = (x.floor() as usize, y.floor() as usize);
    let (x2, y2) = ((x1 + 1).min(w - 1), (y1 + 1).min(h - 1));
    let (fx, fy) = ((x - x1 as f64) as f32, (y - y1 as f64) as f32);
    let top = tex[y1 * w + x1] * (1.0 - fx) + tex[y1 * w + x2] * fx;
    let bot = tex[y2 * w + x1] * (1.0 - fx) + tex[y2 * w + x2] * fx;
    top * (1.0 - fy) + bot * fy
}

struct ShapeTexture {
    data: Vec<f32>,
    h: usize,
    w: usize,
}

fn advance(spec: &SceneSpec, shape: &ShapeSpec, pos: [f64; 2], vel: &mut [f64; 2]) -> [f64; 2] {
    let (hx, hy) = shape.half_extents();
    let limits = [(hx, spec.width as f64 - hx), (hy, spec.height as f64 - hy)];
    let mut next = pos;
    for a in 0..2 {
        if pos[a] + vel[a] < limits[a].0 || pos[a] + vel[a] > limits[a].1 {
            vel[a] = -vel[a];
        }
        next[a] = (pos[a] + vel[a]).clamp(limits[a].0, limits[a].1);
    }
    next
}

/// Renders the sequence described by `spec`.
pub fn generate(spec: &SceneSpec) -> Result<SceneSequence> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let bg = texture(h, w, spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let textures: Vec<ShapeTexture> = spec
        .shapes
        .iter()
        .map(|s| {
            let (hx, hy) = s.half_extents();
            let (th, tw) = ((2.0 * hy).ceil() as usize + 3, (2.0 * hx).ceil() as usize + 3);
            ShapeTexture { data: texture(th, tw, s.texture_seed), h: th, w: tw }
        })
        .collect();

    let mut positions = Vec::with_capacity(spec.length);
    let mut pos: Vec<[f64; 2]> = spec.shapes.iter().map(|s| s.center).collect();
    let mut vel: Vec<[f64; 2]> = spec.shapes.iter().map(|s| s.velocity).collect();
    positions.push(pos.clone());
    for _ in 1..spec.length {
        for (i, s) in spec.shapes.iter().enumerate() {
            pos[i] = advance(spec, s, pos[i], &mut vel[i]);
        }
        positions.push(pos.clone());
    }

    let owner_map = |t: usize| -> Vec<u8> {
        let mut owner = vec![0u8; h * w];
        for (i, s) in spec.shapes.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if s.covers(positions[t][i], x as f64, y as f64) {
                        owner[y * w + x] = (i + 1) as u8;
                    }
                }
            }
        }
        owner
    };

    let amp = spec.texture_amplitude;
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).map_err(|e| Error::Validation(e.to_string()))?;
    let mut seq = SceneSequence {
        num_classes: spec.num_classes,
        frames: Vec::with_capacity(spec.length),
        labels: Vec::with_capacity(spec.length),
        instances: Vec::with_capacity(spec.length),
        gt_flow: Vec::with_capacity(spec.length),
        occlusion: Vec::with_capacity(spec.length),
        positions: Vec::new(),
    };
    let mut prev_owner: Option<Vec<u8>> = None;
    for t in 0..spec.length {
        let owner = owner_map(t);
        let mut frame = Tensor::<f32>::zeros(Shape::new(1, 3, h, w));
        let mut labels = vec![BACKGROUND_CLASS; h * w];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(t as u64));
        for p in 0..h * w {
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            let (color, tex) = match owner[p] {
                0 => (spec.background_color, bg[p]),
                o => {
                    let i = o as usize - 1;
                    let s = &spec.shapes[i];
                    labels[p] = s.class;
                    let (hx, hy) = s.half_extents();
                    let [cx, cy] = positions[t][i];
                    let tx = &textures[i];
                    (s.color, sample_texture(&tx.data, tx.h, tx.w, x - (cx - hx) + 1.0, y - (cy - hy) + 1.0))
                }
            };
            for c in 0..3 {
                let mut v = color[c] + amp * (tex - 0.5);
                if spec.noise_std > 0.0 {
                    v += noise.sample(&mut rng) as f32;
                }
                frame.data_mut()[c * h * w + p] = v.clamp(0.0, 1.0);
            }
        }

        match &prev_owner {
            None => {
                seq.gt_flow.push(None);
                seq.occlusion.push(None);
            }
            Some(prev) => {
                let mut flow = FlowField::<f32>::zeros(1, h, w);
                let mut occ = vec![0u8; h * w];
                let eps = DEFAULT_EPSILON as f32;
                for p in 0..h * w {
                    let (x, y) = (p % w, p / w);
                    let o = owner[p];
                    let (u, v) = match o {
                        0 => (0.0f32, 0.0f32),
                        o => {
                            let i = o as usize - 1;
                            let d = [positions[t - 1][i][0] - positions[t][i][0], positions[t - 1][i][1] - positions[t][i][1]];
                            (d[0] as f32, d[1] as f32)
                        }
                    };
                    flow.set(0, y, x, u, v);
                    let (tx, ty) = (x as f32 + u, y as f32 + v);
                    let off = tx < 0.0 || ty < 0.0 || tx > (w - 1) as f32 || ty > (h - 1) as f32;
                    let sp = warp::sample_point(x, y, u, v, eps, w, h);
                    let support = [sp.y1 * w + sp.x1, sp.y2 * w + sp.x1, sp.y1 * w + sp.x2, sp.y2 * w + sp.x2];
                    if off || support.iter().any(|&q| prev[q] != o) {
                        occ[p] = 1;
                    }
                }
                seq.gt_flow.push(Some(flow));
                seq.occlusion.push(Some(LabelMap::new(h, w, occ)?));
            }
        }
        seq.frames.push(frame);
        seq.labels.push(LabelMap::new(h, w, labels)?);
        seq.instances.push(LabelMap::new(h, w, owner.clone())?);
        prev_owner = Some(owner);
    }
    seq.positions = positions;
    Ok(seq)
}

/// Parameters of randomly drawn benchmark scenes: class 1 blobs (rectangles
/// and discs) and class 2 thin bars over a class 0 background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomSceneConfig {
    pub height: usize,
    pub width: usize,
    pub length: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub thin_bars: usize,
    /// Blob extent range in pixels.
    pub blob_size: [f64; 2],
    /// Thin bar length range in pixels.
    pub bar_length: [f64; 2],
    pub max_speed: f64,
    pub noise_std: f64,
    pub texture_amplitude: f32,
    /// Attempts at drawing a scene where every class is visible in every frame.
    pub max_retries: usize,
}

impl Default for RandomSceneConfig {
    fn default() -> Self {
        RandomSceneConfig {
            height: 64,
            width: 64,
            length: 30,
            min_blobs: 1,
            max_blobs: 3,
            thin_bars: 1,
            blob_size: [10.0, 24.0],
            bar_length: [20.0, 44.0],
            max_speed: 3.0,
            noise_std: 0.2,
            texture_amplitude: 0.4,
            max_retries: 50,
        }
    }
}

pub const NUM_CLASSES: usize = 3;
pub const BLOB_CLASS: u8 = 1;
pub const BAR_CLASS: u8 = 2;
/// Classes made of countable objects.
pub const INSTANCE_CLASSES: [u8; 2] = [BLOB_CLASS, BAR_CLASS];

const BACKGROUND_COLOR: [f32; 3] = [0.5, 0.5, 0.45];
const BLOB_COLOR: [f32; 3] = [0.7, 0.4, 0.35];
const BAR_COLOR: [f32; 3] = [0.35, 0.45, 0.7];

fn jitter<R: Rng>(base: [f32; 3], rng: &mut R) -> [f32; 3] {
    base.map(|c| c + rng.random_range(-0.05..=0.05))
}

fn draw_spec(cfg: &RandomSceneConfig, rng: &mut ChaCha8Rng, seed: u64) -> SceneSpec {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let velocity = |rng: &mut ChaCha8Rng| {
        [rng.random_range(-cfg.max_speed..=cfg.max_speed), rng.random_range(-cfg.max_speed..=cfg.max_speed)]
    };
    let place = |rng: &mut ChaCha8Rng, size: [f64; 2]| {
        let (hx, hy) = (size[0] / 2.0, size[1] / 2.0);
        [rng.random_range(hx..=w - hx), rng.random_range(hy..=h - hy)]
    };
    let mut shapes = Vec::new();
    let blobs = rng.random_range(cfg.min_blobs..=cfg.max_blobs);
    for _ in 0..blobs {
        let kind = if rng.random_bool(0.5) { ShapeKind::Rectangle } else { ShapeKind::Disc };
        let size = match kind {
            ShapeKind::Disc => {
                let d = rng.random_range(cfg.blob_size[0]..=cfg.blob_size[1]);
                [d, d]
            }
            _ => [rng.random_range(cfg.blob_size[0]..=cfg.blob_size[1]), rng.random_range(cfg.blob_size[0]..=cfg.blob_size[1])],
        };
        let center = place(rng, size);
        shapes.push(ShapeSpec {
            kind,
            class: BLOB_CLASS,
            center,
            size,
            velocity: velocity(rng),
            color: jitter(BLOB_COLOR, rng),
            texture_seed: rng.random(),
        });
    }
    for _ in 0..cfg.thin_bars {
        let thickness = rng.random_range(1.0..=3.0);
        let length = rng.random_range(cfg.bar_length[0]..=cfg.bar_length[1]).min(w.min(h));
        let size = if rng.random_bool(0.5) { [length, thickness] } else { [thickness, length] };
        let center = place(rng, size);
        shapes.push(ShapeSpec {
            kind: ShapeKind::ThinBar,
            class: BAR_CLASS,
            center,
            size,
            velocity: velocity(rng),
            color: jitter(BAR_COLOR, rng),
            texture_seed: rng.random(),
        });
    }
    SceneSpec {
        height: cfg.height,
        width: cfg.width,
        length: cfg.length,
        num_classes: NUM_CLASSES,
        seed,
        noise_std: cfg.noise_std,
        texture_amplitude: cfg.texture_amplitude,
        background_color: BACKGROUND_COLOR,
        shapes,
    }
}

fn all_classes_every_frame(seq: &SceneSequence) -> bool {
    seq.labels.iter().all(|l| {
        let mut seen = vec![false; seq.num_classes];
        for &v in l.data() {
            seen[v as usize] = true;
        }
        seen.iter().all(|&s| s)
    })
}

/// Draws a scene from `cfg`, re-drawing until every class appears in every frame.
pub fn random_scene(cfg: &RandomSceneConfig, seed: u64) -> Result<(SceneSpec, SceneSequence)> {
    if cfg.max_speed > MAX_SPEED || cfg.min_blobs > cfg.max_blobs || cfg.min_blobs == 0 || cfg.thin_bars == 0 {
        return Err(invalid!("random scene config needs 1 <= min_blobs <= max_blobs, thin_bars >= 1, max_speed <= {MAX_SPEED}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..cfg.max_retries.max(1) {
        let spec = draw_spec(cfg, &mut rng, seed.wrapping_add(attempt as u64));
        let seq = generate(&spec)?;
        if all_classes_every_frame(&seq) {
            return Ok((spec, seq));
        }
    }
    Err(invalid!("no scene with every class in every frame after {} attempts (seed {seed})", cfg.max_retries))
}
