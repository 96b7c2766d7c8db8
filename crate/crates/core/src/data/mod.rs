//! Synthetic moving-sprite sequences with ground-truth centers.
//!
//! Sprites move with constant velocity and bounce off the frame edges
//! (linear motion) or follow a random ellipse at constant angular velocity
//! (elliptic motion). Positions are real-valued and every frame is rendered
//! by bilinear interpolation of the sprite raster at its sub-pixel offset.
//! Overlapping sprites are composited by clamped addition.

mod io;
pub mod sprites;

use std::f64::consts::TAU;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use io::{read_dataset, write_dataset, Dataset, DatasetManifest, FORMAT_VERSION};
use sprites::{ImageBank, Sprite};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Linear,
    Elliptic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BounceMode {
    /// Bounce as soon as any sprite pixel would leave the frame.
    Appearance,
    /// Bounce only on the top-left bounding-box corner; sprites may exit right/bottom.
    BboxCorner,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteSource {
    Procedural,
    /// IDX3 unsigned-byte image file (e.g. the MNIST digit files).
    ImageBank(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// `[H, W]`.
    pub frame_hw: [usize; 2],
    pub seq_len: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub motion: Motion,
    pub overlap_first_frame: bool,
    pub bounce_mode: BounceMode,
    pub sprite_source: SpriteSource,
    /// Procedural sprite extent range in pixels.
    pub sprite_px: [usize; 2],
    /// Linear speed range in pixels per frame.
    pub speed: [f64; 2],
    /// Angular speed range in radians per frame (elliptic motion).
    pub angular_speed: [f64; 2],
    /// Virtual outward shift of every frame edge used by the bounce rule.
    pub margin_px: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frame_hw: [50, 50],
            seq_len: 20,
            min_objects: 0,
            max_objects: 2,
            motion: Motion::Linear,
            overlap_first_frame: false,
            bounce_mode: BounceMode::Appearance,
            sprite_source: SpriteSource::Procedural,
            sprite_px: [12, 20],
            speed: [1.0, 3.0],
            angular_speed: [0.1, 0.3],
            margin_px: 0,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.frame_hw;
        if self.seq_len == 0 {
            return Err(Error::Config("sequence length must be at least 1".into()));
        }
        if h < 2 || w < 2 {
            return Err(Error::Config("frames must be at least 2x2".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if self.sprite_px[0] == 0 || self.sprite_px[0] > self.sprite_px[1] {
            return Err(Error::Config("bad sprite extent range".into()));
        }
        if self.sprite_source == SpriteSource::Procedural && self.sprite_px[1] + 2 > h.min(w) {
            return Err(Error::Config("sprites larger than the frame".into()));
        }
        if !(self.speed[0] >= 0.0 && self.speed[0] <= self.speed[1]) {
            return Err(Error::Config("bad speed range".into()));
        }
        Ok(())
    }
}

/// Pixel-valued frames `[T, H, W]`, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSequence {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl FrameSequence {
    pub fn zeros(t: usize, h: usize, w: usize) -> Self {
        Self {
            t,
            h,
            w,
            data: vec![0.0; t * h * w],
        }
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.h * self.w;
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.t, self.h, self.w), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Round-trip through the `u8` storage format.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|v| quantize(*v) as f32 / 255.0)
            .collect();
        Self { data, ..*self }
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    /// Ellipse center `(x, y)` in pixels.
    pub center: [f64; 2],
    /// Semi-axes `(a, b)` along x and y.
    pub semi_axes: [f64; 2],
    pub phase: f64,
    pub angular_velocity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectMotion {
    Linear { start: [f64; 2], velocity: [f64; 2] },
    Elliptic(EllipseParams),
}

/// Ground truth for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceAnnotation {
    pub count: usize,
    /// `[t][i] = (x, y)` tight-bounding-box centers in pixels.
    pub centers: Vec<Vec<[f64; 2]>>,
    pub motion: Vec<ObjectMotion>,
    pub seed: u64,
}

/// `center + (a cos(φ + ωt), b sin(φ + ωt))`.
pub fn elliptic_trajectory(p: &EllipseParams, t: f64) -> [f64; 2] {
    let angle = p.phase + p.angular_velocity * t;
    [
        p.center[0] + p.semi_axes[0] * angle.cos(),
        p.center[1] + p.semi_axes[1] * angle.sin(),
    ]
}

/// Child seed for sequence `index` of a dataset with master seed `seed`.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed ^ index.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Allowed range of a bounding-box center coordinate along one axis.
///
/// `lo`/`hi` are the bbox extents relative to the center (lo <= 0 <= hi).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisBounds {
    pub min: f64,
    pub max: f64,
}

fn axis_bounds(mode: BounceMode, extent: usize, lo: f64, hi: f64, margin: f64) -> AxisBounds {
    match mode {
        BounceMode::Appearance => AxisBounds {
            min: -margin - lo,
            max: (extent - 1) as f64 + margin - hi,
        },
        // Only the top-left corner (center + lo) is kept inside.
        BounceMode::BboxCorner => AxisBounds {
            min: -margin - lo,
            max: (extent - 1) as f64 + margin - lo,
        },
    }
}

/// One constant-velocity step with reflection: if the candidate leaves the
/// allowed range, the velocity component flips and the step is taken backwards.
pub fn bounce_step(x: f64, v: f64, b: AxisBounds) -> (f64, f64) {
    let next = x + v;
    if next < b.min || next > b.max {
        let v = -v;
        ((x + v).clamp(b.min, b.max), v)
    } else {
        (next, v)
    }
}

/// Adds `sprite` bilinearly at top-left offset `(ox, oy)` into `canvas`.
pub fn render_sprite(canvas: &mut [f32], h: usize, w: usize, sprite: &Sprite, ox: f64, oy: f64) {
    let (fy0, fx0) = (oy.floor(), ox.floor());
    let (fy, fx) = ((oy - fy0) as f32, (ox - fx0) as f32);
    let (iy, ix) = (fy0 as isize, fx0 as isize);
    let row_weights = [(0isize, 1.0 - fy), (1isize, fy)];
    let col_weights = [(0isize, 1.0 - fx), (1isize, fx)];
    for sr in 0..sprite.h {
        for sc in 0..sprite.w {
            let v = sprite.at(sr, sc);
            if v == 0.0 {
                continue;
            }
            for &(dr, wr) in &row_weights {
                if wr == 0.0 {
                    continue;
                }
                let r = iy + sr as isize + dr;
                if r < 0 || r >= h as isize {
                    continue;
                }
                for &(dc, wc) in &col_weights {
                    if wc == 0.0 {
                        continue;
                    }
                    let c = ix + sc as isize + dc;
                    if c < 0 || c >= w as isize {
                        continue;
                    }
                    canvas[r as usize * w + c as usize] += v * wr * wc;
                }
            }
        }
    }
}

struct Placement {
    sprite: Sprite,
    motion: ObjectMotion,
}

impl Placement {
    /// Bounding-box centers `(x, y)` for every frame.
    fn trajectory(&self, cfg: &DataConfig) -> Vec<[f64; 2]> {
        match self.motion {
            ObjectMotion::Elliptic(p) => (0..cfg.seq_len)
                .map(|t| elliptic_trajectory(&p, t as f64))
                .collect(),
            ObjectMotion::Linear { start, velocity } => {
                let (lo, hi) = self.sprite.half_extents();
                let margin = cfg.margin_px as f64;
                let bx = axis_bounds(cfg.bounce_mode, cfg.frame_hw[1], lo[0], hi[0], margin);
                let by = axis_bounds(cfg.bounce_mode, cfg.frame_hw[0], lo[1], hi[1], margin);
                let mut out = Vec::with_capacity(cfg.seq_len);
                let (mut p, mut v) = (start, velocity);
                out.push(p);
                for _ in 1..cfg.seq_len {
                    let (x, vx) = bounce_step(p[0], v[0], bx);
                    let (y, vy) = bounce_step(p[1], v[1], by);
                    p = [x, y];
                    v = [vx, vy];
                    out.push(p);
                }
                out
            }
        }
    }
}

fn sample_linear<R: Rng>(rng: &mut R, cfg: &DataConfig, sprite: &Sprite) -> ObjectMotion {
    let (lo, hi) = sprite.half_extents();
    let [h, w] = cfg.frame_hw;
    // Start fully inside the real frame.
    let bx = axis_bounds(BounceMode::Appearance, w, lo[0], hi[0], 0.0);
    let by = axis_bounds(BounceMode::Appearance, h, lo[1], hi[1], 0.0);
    let start = [
        rng.random_range(bx.min..=bx.max.max(bx.min)),
        rng.random_range(by.min..=by.max.max(by.min)),
    ];
    let speed = rng.random_range(cfg.speed[0]..=cfg.speed[1]);
    let angle = rng.random_range(0.0..TAU);
    ObjectMotion::Linear {
        start,
        velocity: [speed * angle.cos(), speed * angle.sin()],
    }
}

fn sample_elliptic<R: Rng>(rng: &mut R, cfg: &DataConfig, sprite: &Sprite) -> ObjectMotion {
    let (lo, hi) = sprite.half_extents();
    let [h, w] = cfg.frame_hw;
    let room = [
        (w - 1) as f64 - (hi[0] - lo[0]),
        (h - 1) as f64 - (hi[1] - lo[1]),
    ];
    let mut semi = [0.0; 2];
    let mut center = [0.0; 2];
    for d in 0..2 {
        let r = room[d].max(0.0);
        semi[d] = rng.random_range(0.25 * r..=0.5 * r);
        let (cmin, cmax) = (semi[d] - lo[d], (if d == 0 { w } else { h } - 1) as f64 - hi[d] - semi[d]);
        center[d] = if cmax > cmin { rng.random_range(cmin..=cmax) } else { 0.5 * (cmin + cmax) };
    }
    let speed = rng.random_range(cfg.angular_speed[0]..=cfg.angular_speed[1]);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    ObjectMotion::Elliptic(EllipseParams {
        center,
        semi_axes: semi,
        phase: rng.random_range(0.0..TAU),
        angular_velocity: sign * speed,
    })
}

fn render_alone(cfg: &DataConfig, sprite: &Sprite, center: [f64; 2]) -> Vec<f32> {
    let [h, w] = cfg.frame_hw;
    let mut canvas = vec![0f32; h * w];
    let [bx, by] = sprite.bbox_center();
    render_sprite(&mut canvas, h, w, sprite, center[0] - bx, center[1] - by);
    canvas
}

const PLACEMENT_ATTEMPTS: usize = 1000;
/// Full re-placements tried when an earlier sprite leaves no room for a later one.
const PLACEMENT_RESTARTS: usize = 10;

/// Places the sprites one after another; `None` when one of them finds no free spot.
fn place_all(cfg: &DataConfig, sprites: &[Sprite], rng: &mut ChaCha8Rng) -> Option<Vec<Placement>> {
    let mut objects: Vec<Placement> = Vec::with_capacity(sprites.len());
    let mut firsts: Vec<Vec<f32>> = Vec::with_capacity(sprites.len());
    for sprite in sprites {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let motion = match cfg.motion {
                Motion::Linear => sample_linear(rng, cfg, sprite),
                Motion::Elliptic => sample_elliptic(rng, cfg, sprite),
            };
            let candidate = Placement {
                sprite: sprite.clone(),
                motion,
            };
            let mine = render_alone(cfg, &candidate.sprite, candidate.trajectory(cfg)[0]);
            if !cfg.overlap_first_frame
                && firsts
                    .iter()
                    .any(|theirs| mine.iter().zip(theirs).any(|(a, b)| *a > 0.0 && *b > 0.0))
            {
                continue;
            }
            objects.push(candidate);
            firsts.push(mine);
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}

/// Sprite provider shared across sequences.
pub enum SpriteBank {
    Procedural { lo: usize, hi: usize },
    Images(ImageBank),
}

impl SpriteBank {
    pub fn for_config(cfg: &DataConfig) -> Result<Self> {
        Ok(match &cfg.sprite_source {
            SpriteSource::Procedural => SpriteBank::Procedural {
                lo: cfg.sprite_px[0],
                hi: cfg.sprite_px[1],
            },
            SpriteSource::ImageBank(path) => SpriteBank::Images(ImageBank::load(path)?),
        })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Result<Sprite> {
        match self {
            SpriteBank::Procedural { lo, hi } => Ok(sprites::procedural(rng, *lo, *hi)),
            SpriteBank::Images(bank) => bank.sample(rng),
        }
    }
}

fn sample_objects(cfg: &DataConfig, bank: &SpriteBank, rng_seed: u64) -> Result<Vec<Placement>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let sprites: Vec<Sprite> = (0..count).map(|_| bank.sample(&mut rng)).collect::<Result<_>>()?;
    for _ in 0..PLACEMENT_RESTARTS {
        if let Some(o) = place_all(cfg, &sprites, &mut rng) {
            return Ok(o);
        }
    }
    Err(Error::PlacementExhausted {
        attempts: PLACEMENT_ATTEMPTS * PLACEMENT_RESTARTS,
    })
}

/// The sprites and motions behind `gen_sequence(cfg, rng_seed)`.
pub fn sequence_objects(cfg: &DataConfig, rng_seed: u64) -> Result<Vec<(Sprite, ObjectMotion)>> {
    cfg.validate()?;
    let bank = SpriteBank::for_config(cfg)?;
    Ok(sample_objects(cfg, &bank, rng_seed)?
        .into_iter()
        .map(|p| (p.sprite, p.motion))
        .collect())
}

/// Generates one sequence; deterministic in `(cfg, rng_seed)`.
pub fn gen_sequence(cfg: &DataConfig, rng_seed: u64) -> Result<(FrameSequence, SequenceAnnotation)> {
    cfg.validate()?;
    let bank = SpriteBank::for_config(cfg)?;
    gen_sequence_with(cfg, &bank, rng_seed)
}

pub fn gen_sequence_with(
    cfg: &DataConfig,
    bank: &SpriteBank,
    rng_seed: u64,
) -> Result<(FrameSequence, SequenceAnnotation)> {
    let objects = sample_objects(cfg, bank, rng_seed)?;
    let count = objects.len();
    let [h, w] = cfg.frame_hw;
    let mut frames = FrameSequence::zeros(cfg.seq_len, h, w);
    let trajectories: Vec<Vec<[f64; 2]>> = objects.iter().map(|o| o.trajectory(cfg)).collect();
    for t in 0..cfg.seq_len {
        let canvas = frames.frame_mut(t);
        for (o, traj) in objects.iter().zip(&trajectories) {
            let [bx, by] = o.sprite.bbox_center();
            render_sprite(canvas, h, w, &o.sprite, traj[t][0] - bx, traj[t][1] - by);
        }
        for v in canvas.iter_mut() {
            *v = v.min(1.0);
        }
    }
    let centers = (0..cfg.seq_len)
        .map(|t| trajectories.iter().map(|tr| tr[t]).collect())
        .collect();
    let annotation = SequenceAnnotation {
        count,
        centers,
        motion: objects.iter().map(|o| o.motion).collect(),
        seed: rng_seed,
    };
    Ok((frames, annotation))
}
