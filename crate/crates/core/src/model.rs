//! The assembled sequence model and its ablation variants.

use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::air::{self, AirConfig, AirInference, AirLatents, AirNet};
use crate::data::FrameSequence;
use crate::error::{Error, Result};
use crate::find::{FindConfig, FindNet, Track};
use crate::geometry;
use crate::mot::{mot_pipeline, rollout, MotConfig, MotOutput, MotionNet, Transition, TransitionNet};
use crate::nn::ParamStore;
use crate::prob::{Normal, Sampler};
use crate::rect::{RectConfig, RectMode, RectNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Independent per-frame inference.
    Air,
    Find,
    RectFind,
    FindMot,
    #[default]
    Vtssi,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Air,
        Variant::Find,
        Variant::RectFind,
        Variant::FindMot,
        Variant::Vtssi,
    ];

    pub fn uses_rect(self) -> bool {
        matches!(self, Variant::RectFind | Variant::Vtssi)
    }

    pub fn uses_mot(self) -> bool {
        matches!(self, Variant::FindMot | Variant::Vtssi)
    }

    pub fn uses_find(self) -> bool {
        self != Variant::Air
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Air => "air",
            Variant::Find => "find",
            Variant::RectFind => "rect_find",
            Variant::FindMot => "find_mot",
            Variant::Vtssi => "vtssi",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::invalid(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VtssiConfig {
    pub variant: Variant,
    /// Rectification prefix.
    pub k: usize,
    /// Motion seed prefix.
    pub m: usize,
    pub t: usize,
    pub frame_hw: [usize; 2],
    pub precision: Precision,
    pub air: AirConfig,
    pub find: FindConfig,
    pub rect: RectConfig,
    pub mot: MotConfig,
}

impl Default for VtssiConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Vtssi,
            k: 5,
            m: 5,
            t: 20,
            frame_hw: [50, 50],
            precision: Precision::F32,
            air: AirConfig::default(),
            find: FindConfig::default(),
            rect: RectConfig::default(),
            mot: MotConfig::default(),
        }
    }
}

impl VtssiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.k == 0 || self.m == 0 || self.k > self.t || self.m > self.t {
            return Err(Error::Config(format!(
                "need 1 <= K, M <= T (K = {}, M = {}, T = {})",
                self.k, self.m, self.t
            )));
        }
        self.air.validate()?;
        self.mot.fusion.validate()
    }

    /// Narrow networks for small frames; same structure as the default.
    pub fn compact(variant: Variant, frame_hw: [usize; 2], t: usize, k: usize, m: usize) -> Self {
        let base = Self::default();
        Self {
            variant,
            k,
            m,
            t,
            frame_hw,
            air: AirConfig {
                glimpse: 12,
                desc_dim: 8,
                nets: air::AirNets {
                    cnt_channels: 8,
                    cnt_dense: vec![64, 32],
                    pre_channels: 8,
                    loc_hidden: 64,
                    loc_head: 32,
                    encoder: vec![64, 32],
                    decoder: vec![32, 64],
                    ..base.air.nets.clone()
                },
                ..base.air.clone()
            },
            find: FindConfig {
                n_kernels: 4,
                kernel: 7,
                kernel_mlp: vec![32, 64],
                conv_channels: [8, 16],
                dense: vec![64, 32],
                features: 24,
                pos_mlp: vec![32, 32],
                pos_head: 16,
                ..base.find.clone()
            },
            rect: RectConfig {
                hidden: 32,
                dense: vec![32, 32],
            },
            mot: MotConfig {
                motion_dim: 6,
                lstm_hidden: 32,
                head_hidden: 16,
                transition_mlp: vec![32, 32],
                transition_head: 16,
                ..base.mot.clone()
            },
            ..base
        }
    }

    /// Rectification prefix used for sequences of length `len`.
    pub fn k_for(&self, len: usize) -> usize {
        if self.variant.uses_rect() {
            self.k.min(len)
        } else {
            1
        }
    }

    /// Motion prefix used for sequences of length `len`.
    pub fn m_for(&self, len: usize) -> usize {
        self.m.min(len)
    }
}

/// Mode of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub training: bool,
    pub global_step: u64,
    pub rect_mode: RectMode,
}

impl RunOptions {
    pub fn train(global_step: u64) -> Self {
        Self {
            training: true,
            global_step,
            rect_mode: RectMode::Soft,
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            global_step: 0,
            rect_mode: RectMode::Soft,
        }
    }
}

/// Independent random streams for latent noise (including dropout) and fusion weights.
#[derive(Debug, Clone)]
pub struct Noise {
    pub latent: Sampler,
    pub fusion: Sampler,
}

impl Noise {
    pub fn seeded(seed: u64) -> Self {
        Self {
            latent: Sampler::seeded(crate::data::child_seed(seed, 0)),
            fusion: Sampler::seeded(crate::data::child_seed(seed, 1)),
        }
    }

    /// Every latent replaced by its mode.
    pub fn mode() -> Self {
        Self {
            latent: Sampler::Mode,
            fusion: Sampler::Mode,
        }
    }
}

/// Active `(sequence, slot)` pairs in sequence-major, slot-minor order.
#[derive(Debug, Clone)]
pub struct ObjectIndex {
    pub pairs: Vec<(usize, usize)>,
    /// Sequence of each object, `[A]`.
    pub seq: Tensor,
    /// `seq * N + slot`, `[A]`.
    pub flat: Tensor,
}

impl ObjectIndex {
    pub fn new(n_ceil: &[usize], n: usize, dev: &candle_core::Device) -> Result<Self> {
        let pairs: Vec<(usize, usize)> = n_ceil
            .iter()
            .enumerate()
            .flat_map(|(b, &c)| (0..c).map(move |i| (b, i)))
            .collect();
        let seq: Vec<u32> = pairs.iter().map(|(b, _)| *b as u32).collect();
        let flat: Vec<u32> = pairs.iter().map(|(b, i)| (b * n + i) as u32).collect();
        Ok(Self {
            seq: Tensor::from_vec(seq, pairs.len(), dev)?,
            flat: Tensor::from_vec(flat, pairs.len(), dev)?,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Per-frame scenes of the `air` variant.
#[derive(Debug, Clone)]
pub struct FrameScenes {
    /// Inference over `[B * T]` frames, sequence-major.
    pub inference: AirInference,
    pub batch: usize,
    pub len: usize,
    /// `[B, T, H, W]`
    pub mean: Tensor,
}

/// Latents of a batch of sequences for the tracking variants.
#[derive(Debug, Clone)]
pub struct SceneLatents {
    pub len: usize,
    pub k: usize,
    pub m: usize,
    /// Per-frame inference on the first `k` frames (`[B * k]`, sequence-major).
    pub intermediate: AirInference,
    /// `[B, k]`
    pub rect_weights: Tensor,
    /// `[B, 1]`
    pub cnt: Normal,
    pub cnt_sample: Tensor,
    /// `[B]`
    pub n_tilde: Tensor,
    pub n_ceil: Vec<usize>,
    /// `[B, N, 2]`
    pub size: Normal,
    pub size_sample: Tensor,
    /// `[B, N, d]`
    pub desc: Normal,
    pub desc_sample: Tensor,
    pub objects: ObjectIndex,
    /// Positions inferred by tracking, `[A, T, 2]`.
    pub find: Track,
    /// Final positions `[A, T, 2]`.
    pub positions: Normal,
    pub position_samples: Tensor,
    pub mot: Option<MotOutput>,
    /// Likelihood mean `[B, T, H, W]`.
    pub mean: Tensor,
}

#[derive(Debug, Clone)]
pub enum Forward {
    Frames(FrameScenes),
    Scene(Box<SceneLatents>),
}

impl Forward {
    pub fn mean(&self) -> &Tensor {
        match self {
            Forward::Frames(f) => &f.mean,
            Forward::Scene(s) => &s.mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Latent {
    Count,
    Size,
    Description,
    Position,
    Motion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prior {
    /// Annealed count prior.
    Count,
    /// Fixed size prior.
    Size,
    StandardNormal,
    /// Centered on the previous position sample, fixed scale, no gradient.
    PreviousPosition,
    PredictedPosition,
    PredictedMotion,
}

/// One KL term of the objective. `time` is a 0-based frame index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KlRecord {
    pub seq: usize,
    pub object: Option<usize>,
    pub time: Option<usize>,
    pub latent: Latent,
    pub prior: Prior,
}

/// Objective terms, each `[B]`, plus the KL bookkeeping.
#[derive(Debug, Clone)]
pub struct Elbo {
    pub elbo: Tensor,
    pub recon: Tensor,
    pub kl_cnt: Tensor,
    pub kl_size: Tensor,
    pub kl_desc: Tensor,
    pub kl_position: Tensor,
    pub kl_motion: Tensor,
    pub records: Vec<KlRecord>,
}

/// Batch means of the objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboSummary {
    pub elbo: f64,
    pub recon: f64,
    pub kl_cnt: f64,
    pub kl_size: f64,
    pub kl_desc: f64,
    pub kl_position: f64,
    pub kl_motion: f64,
}

fn batch_mean(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?)
}

impl Elbo {
    pub fn summary(&self) -> Result<ElboSummary> {
        Ok(ElboSummary {
            elbo: batch_mean(&self.elbo)?,
            recon: batch_mean(&self.recon)?,
            kl_cnt: batch_mean(&self.kl_cnt)?,
            kl_size: batch_mean(&self.kl_size)?,
            kl_desc: batch_mean(&self.kl_desc)?,
            kl_position: batch_mean(&self.kl_position)?,
            kl_motion: batch_mean(&self.kl_motion)?,
        })
    }
}

/// The KL terms the factorized objective calls for, given the active objects.
///
/// Count, size and description priors appear once per sequence (or per frame
/// for the per-frame variant); positions get a standard-normal prior at the
/// first frame, a previous-position prior up to the motion prefix, and the
/// predicted Gaussian afterwards; motions get a standard-normal prior at the
/// end of the prefix and the predicted Gaussian afterwards.
pub fn expected_kl_terms(variant: Variant, len: usize, m: usize, n_ceil: &[usize]) -> Vec<KlRecord> {
    let mut out = Vec::new();
    let rec = |seq, object, time, latent, prior| KlRecord {
        seq,
        object,
        time,
        latent,
        prior,
    };
    if variant == Variant::Air {
        for (s, counts) in n_ceil.chunks(len).enumerate() {
            for (t, &c) in counts.iter().enumerate() {
                out.push(rec(s, None, Some(t), Latent::Count, Prior::Count));
                for i in 0..c {
                    out.push(rec(s, Some(i), Some(t), Latent::Size, Prior::Size));
                    out.push(rec(s, Some(i), Some(t), Latent::Position, Prior::StandardNormal));
                    out.push(rec(s, Some(i), Some(t), Latent::Description, Prior::StandardNormal));
                }
            }
        }
        out.sort();
        return out;
    }
    let horizon = if variant.uses_mot() { m } else { len };
    for (s, &c) in n_ceil.iter().enumerate() {
        out.push(rec(s, None, None, Latent::Count, Prior::Count));
        for i in 0..c {
            out.push(rec(s, Some(i), None, Latent::Size, Prior::Size));
            out.push(rec(s, Some(i), None, Latent::Description, Prior::StandardNormal));
            for t in 0..len {
                let prior = if t == 0 {
                    Prior::StandardNormal
                } else if t < horizon {
                    Prior::PreviousPosition
                } else {
                    Prior::PredictedPosition
                };
                out.push(rec(s, Some(i), Some(t), Latent::Position, prior));
            }
            if variant.uses_mot() {
                for t in m - 1..len {
                    let prior = if t == m - 1 {
                        Prior::StandardNormal
                    } else {
                        Prior::PredictedMotion
                    };
                    out.push(rec(s, Some(i), Some(t), Latent::Motion, prior));
                }
            }
        }
    }
    out.sort();
    out
}

/// Inference output of one sequence for evaluation and plotting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub observed: usize,
    pub horizon: usize,
    /// Continuous count per observed frame (one entry unless per-frame).
    pub n_tilde: Vec<f64>,
    /// Rounded count per observed frame (one entry unless per-frame).
    pub counts: Vec<usize>,
    /// Normalized positions `[slot][t]` over the horizon, one track per
    /// processed slot (the first `counts` are the reported objects).
    pub tracks: Vec<Vec<[f64; 2]>>,
    /// Tracking-stage positions before fusion over the observed frames.
    pub find_tracks: Vec<Vec<[f64; 2]>>,
    /// Generated frames over the horizon.
    pub frames: FrameSequence,
}

impl Prediction {
    /// Count reported for the whole sequence (first frame for per-frame inference).
    pub fn count(&self) -> usize {
        self.counts[0]
    }
}

/// Model parameters plus networks.
#[derive(Debug)]
pub struct Vtssi {
    cfg: VtssiConfig,
    store: ParamStore,
    air: AirNet,
    find: Option<FindNet>,
    rect: Option<RectNet>,
    motion: Option<MotionNet>,
    transition: Option<Box<dyn Transition>>,
    air_frames: AtomicUsize,
}

fn frame_slice(n: &Normal, b: usize, k: usize, kk: usize) -> Result<Normal> {
    let pick = |t: &Tensor| -> Result<Tensor> {
        let mut dims = vec![b, k];
        dims.extend_from_slice(&t.dims()[1..]);
        Ok(t.reshape(dims)?.narrow(1, kk, 1)?.squeeze(1)?)
    };
    Normal::new(pick(&n.loc)?, pick(&n.scale)?)
}

fn frame_latents(l: &AirLatents, b: usize, k: usize, kk: usize) -> Result<AirLatents> {
    Ok(AirLatents {
        cnt: frame_slice(&l.cnt, b, k, kk)?,
        size: frame_slice(&l.size, b, k, kk)?,
        position: frame_slice(&l.position, b, k, kk)?,
        desc: frame_slice(&l.desc, b, k, kk)?,
    })
}

/// Sums per-object values `[A]` into per-sequence values `[B]`.
fn per_sequence(values: &Tensor, seq: &Tensor, b: usize) -> Result<Tensor> {
    Ok(Tensor::zeros(b, values.dtype(), values.device())?.index_add(seq, values, 0)?)
}

fn gather_slots(t: &Tensor, flat: &Tensor) -> Result<Tensor> {
    let (b, n) = (t.dim(0)?, t.dim(1)?);
    let mut dims = vec![b * n];
    dims.extend_from_slice(&t.dims()[2..]);
    Ok(t.reshape(dims)?.index_select(flat, 0)?)
}

/// Renders objects with static glimpses `[A, g, g]` and per-step positions
/// `[A, T, 2]` into per-sequence canvases `[B, T, H, W]`.
#[allow(clippy::too_many_arguments)]
fn render_tracks(
    glimpses: &Tensor,
    steps: &Tensor,
    size: &Tensor,
    positions: &Tensor,
    mask: Option<&Tensor>,
    objects: &ObjectIndex,
    b: usize,
    hw: [usize; 2],
) -> Result<Tensor> {
    let (a, t, _) = positions.dims3()?;
    let [h, w] = hw;
    let g = glimpses.dim(1)?;
    let mut q = glimpses.clone();
    if let Some(m) = mask {
        q = q.broadcast_mul(m)?;
    }
    q = q.broadcast_mul(&steps.reshape((a, 1, 1))?)?;
    let q = q.unsqueeze(1)?.broadcast_as((a, t, g, g))?.reshape((a * t, g, g))?;
    let s = size.unsqueeze(1)?.broadcast_as((a, t, 2))?.reshape((a * t, 2))?;
    let canvases = geometry::paste(&q, &s, &positions.reshape((a * t, 2))?, h, w)?;
    let flat = canvases.reshape((a, t * h * w))?;
    let out = Tensor::zeros((b, t * h * w), flat.dtype(), flat.device())?.index_add(&objects.seq, &flat, 0)?;
    Ok(out.reshape((b, t, h, w))?)
}

impl Vtssi {
    pub fn new(cfg: &VtssiConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(cfg.precision.dtype(), seed);
        let root = store.root();
        let n = cfg.air.max_objects;
        let d = cfg.air.desc_dim;
        let air = AirNet::new(&cfg.air, cfg.frame_hw, root.pp("air"))?;
        let v = cfg.variant;
        let find = if v.uses_find() {
            Some(FindNet::new(&cfg.find, d, cfg.frame_hw, root.pp("find"))?)
        } else {
            None
        };
        let rect = if v.uses_rect() {
            Some(RectNet::new(&cfg.rect, n, d, root.pp("rect"))?)
        } else {
            None
        };
        let (motion, transition) = if v.uses_mot() {
            (
                Some(MotionNet::new(&cfg.mot, d, root.pp("mot.infer"))?),
                Some(Box::new(TransitionNet::new(&cfg.mot, root.pp("mot.transition"))?) as Box<dyn Transition>),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            air,
            find,
            rect,
            motion,
            transition,
            air_frames: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &VtssiConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn air(&self) -> &AirNet {
        &self.air
    }

    pub fn find(&self) -> Option<&FindNet> {
        self.find.as_ref()
    }

    /// Replaces the learned transition (for instance by a hand-set one).
    pub fn set_transition(&mut self, transition: Box<dyn Transition>) -> Result<()> {
        if !self.cfg.variant.uses_mot() {
            return Err(Error::invalid(format!("variant {} has no transition", self.cfg.variant)));
        }
        self.transition = Some(transition);
        Ok(())
    }

    /// Frames processed by per-frame inference since the last reset.
    pub fn air_frame_calls(&self) -> usize {
        self.air_frames.load(Ordering::Relaxed)
    }

    /// Kernel banks derived since the last reset.
    pub fn kernel_derivations(&self) -> usize {
        self.find.as_ref().map_or(0, |f| f.kernel_derivations())
    }

    pub fn reset_counters(&self) {
        self.air_frames.store(0, Ordering::Relaxed);
        if let Some(f) = &self.find {
            f.reset_counters();
        }
    }

    fn mask(&self, opts: &RunOptions) -> Result<Option<Tensor>> {
        let p = self.cfg.air.flatten.p(opts.global_step);
        self.air.mask(p, opts.training, self.dtype())
    }

    fn check_frames(&self, frames: &Tensor) -> Result<(usize, usize)> {
        let (b, t, h, w) = frames.dims4()?;
        if [h, w] != self.cfg.frame_hw {
            return Err(Error::invalid(format!(
                "frames are {h}x{w}, model expects {}x{}",
                self.cfg.frame_hw[0], self.cfg.frame_hw[1]
            )));
        }
        if b == 0 || t == 0 {
            return Err(Error::invalid("empty batch"));
        }
        Ok((b, t))
    }

    /// Full forward pass over frames `[B, T, H, W]`.
    pub fn forward(&self, frames: &Tensor, opts: &RunOptions, noise: &mut Noise) -> Result<Forward> {
        let frames = frames.to_dtype(self.dtype())?;
        self.check_frames(&frames)?;
        if self.cfg.variant == Variant::Air {
            Ok(Forward::Frames(self.forward_frames(&frames, opts, noise)?))
        } else {
            Ok(Forward::Scene(Box::new(self.forward_scene(&frames, opts, noise)?)))
        }
    }

    fn forward_frames(&self, frames: &Tensor, opts: &RunOptions, noise: &mut Noise) -> Result<FrameScenes> {
        let (b, t, h, w) = frames.dims4()?;
        self.air_frames.fetch_add(b * t, Ordering::Relaxed);
        let flat = frames.reshape((b * t, h, w))?;
        let inference = self.air.infer(&flat, &mut noise.latent, opts.training)?;
        let mask = self.mask(opts)?;
        let mean = self
            .air
            .generate(&inference.samples, mask.as_ref())?
            .reshape((b, t, h, w))?;
        Ok(FrameScenes {
            inference,
            batch: b,
            len: t,
            mean,
        })
    }

    fn forward_scene(&self, frames: &Tensor, opts: &RunOptions, noise: &mut Noise) -> Result<SceneLatents> {
        let (b, t, h, w) = frames.dims4()?;
        let cfg = &self.cfg;
        let n = cfg.air.max_objects;
        let (k, m) = (cfg.k_for(t), cfg.m_for(t));
        let dev = frames.device().clone();

        self.air_frames.fetch_add(b * k, Ordering::Relaxed);
        let prefix = frames.narrow(1, 0, k)?.reshape((b * k, h, w))?;
        let intermediate = self.air.infer(&prefix, &mut noise.latent, opts.training)?;

        let (cnt, size, desc, rect_weights, cnt_s, size_s, desc_s) = match &self.rect {
            Some(rect) => {
                let frames_k: Vec<AirLatents> = (0..k)
                    .map(|kk| frame_latents(&intermediate.latents, b, k, kk))
                    .collect::<Result<_>>()?;
                let r = rect.rectify(&frames_k, opts.rect_mode)?;
                let cnt_s = noise.latent.draw(&r.cnt)?;
                let size_s = air::box_size(&noise.latent.draw(&r.size)?)?;
                let desc_s = noise.latent.draw(&r.desc)?;
                (r.cnt, r.size, r.desc, r.weights, cnt_s, size_s, desc_s)
            }
            None => {
                let l = frame_latents(&intermediate.latents, b, k, 0)?;
                let s = &intermediate.samples;
                let pick = |t: &Tensor| -> Result<Tensor> {
                    let mut dims = vec![b, k];
                    dims.extend_from_slice(&t.dims()[1..]);
                    Ok(t.reshape(dims)?.narrow(1, 0, 1)?.squeeze(1)?)
                };
                let w = Tensor::ones((b, 1), self.dtype(), &dev)?;
                (l.cnt, l.size, l.desc, w, pick(&s.cnt)?, pick(&s.size)?, pick(&s.desc)?)
            }
        };

        let n_tilde = air::n_tilde_tensor(&cnt_s, n)?;
        let n_ceil = air::ceil_counts(&n_tilde, n)?;
        let objects = ObjectIndex::new(&n_ceil, n, &dev)?;
        let desc_obj = gather_slots(&desc_s, &objects.flat)?;
        let size_obj = gather_slots(&size_s, &objects.flat)?;

        let find = self.find.as_ref().expect("tracking variants own a tracker");
        let track = find.find_track(frames, &objects.seq, &desc_obj, &mut noise.latent)?;

        let (positions, position_samples, mot) = match (&self.motion, &self.transition) {
            (Some(motion), Some(transition)) => {
                let hat = motion.infer_motion(&track.samples, &size_obj, &desc_obj, m)?;
                let out = mot_pipeline(
                    &track.posterior,
                    &track.samples,
                    &hat,
                    m,
                    transition.as_ref(),
                    &cfg.mot.fusion,
                    opts.training,
                    &mut noise.latent,
                    &mut noise.fusion,
                )?;
                (out.positions.clone(), out.position_samples.clone(), Some(out))
            }
            _ => (track.posterior.clone(), track.samples.clone(), None),
        };

        let steps = gather_slots(&air::split_tensor(&n_tilde, n)?, &objects.flat)?;
        let glimpses = self.air.decode(&desc_obj)?;
        let mask = self.mask(opts)?;
        let mean = render_tracks(
            &glimpses,
            &steps,
            &size_obj,
            &position_samples,
            mask.as_ref(),
            &objects,
            b,
            cfg.frame_hw,
        )?;

        Ok(SceneLatents {
            len: t,
            k,
            m,
            intermediate,
            rect_weights,
            cnt,
            cnt_sample: cnt_s,
            n_tilde,
            n_ceil,
            size,
            size_sample: size_s,
            desc,
            desc_sample: desc_s,
            objects,
            find: track,
            positions,
            position_samples,
            mot,
            mean,
        })
    }

    /// Single-sample ELBO of each sequence in the batch.
    pub fn compute_elbo(&self, frames: &Tensor, fwd: &Forward, global_step: u64) -> Result<Elbo> {
        let frames = frames.to_dtype(self.dtype())?;
        let cnt_loc = self.cfg.air.cnt_prior.loc(global_step);
        match fwd {
            Forward::Frames(f) => self.elbo_frames(&frames, f, cnt_loc),
            Forward::Scene(s) => self.elbo_scene(&frames, s, cnt_loc),
        }
    }

    fn elbo_frames(&self, frames: &Tensor, f: &FrameScenes, cnt_loc: f64) -> Result<Elbo> {
        let (b, t) = (f.batch, f.len);
        let (_, _, h, w) = frames.dims4()?;
        let flat = frames.reshape((b * t, h, w))?;
        let e = self
            .air
            .elbo_with_mean(&flat, &f.inference, cnt_loc, &f.mean.reshape((b * t, h, w))?)?;
        let sum_t = |x: &Tensor| -> Result<Tensor> { Ok(x.reshape((b, t))?.sum(1)?) };
        let zeros = Tensor::zeros(b, frames.dtype(), frames.device())?;
        let mut records = Vec::new();
        for (idx, &c) in e.n_ceil.iter().enumerate() {
            let (s, tt) = (idx / t, idx % t);
            let rec = |object, latent, prior| KlRecord {
                seq: s,
                object,
                time: Some(tt),
                latent,
                prior,
            };
            records.push(rec(None, Latent::Count, Prior::Count));
            for i in 0..c {
                records.push(rec(Some(i), Latent::Size, Prior::Size));
                records.push(rec(Some(i), Latent::Position, Prior::StandardNormal));
                records.push(rec(Some(i), Latent::Description, Prior::StandardNormal));
            }
        }
        records.sort();
        Ok(Elbo {
            elbo: sum_t(&e.elbo)?,
            recon: sum_t(&e.recon)?,
            kl_cnt: sum_t(&e.kl_cnt)?,
            kl_size: sum_t(&e.kl_size)?,
            kl_desc: sum_t(&e.kl_desc)?,
            kl_position: sum_t(&e.kl_position)?,
            kl_motion: zeros,
            records,
        })
    }

    fn elbo_scene(&self, frames: &Tensor, s: &SceneLatents, cnt_loc: f64) -> Result<Elbo> {
        let cfg = &self.cfg;
        let n = cfg.air.max_objects;
        let (b, t, _, _) = frames.dims4()?;
        let (dt, dev) = (frames.dtype(), frames.device().clone());
        let recon = air::pixel_log_lik(frames, &s.mean, cfg.air.sigma_l)?;

        let kl_cnt = s
            .cnt
            .kl(&Normal::constant(&[cnt_loc], cfg.air.cnt_prior.scale, &[b], dt, &dev)?)?;
        let active = air::active_mask(&s.n_ceil, n, dt, &dev)?;
        let kl_size = (s
            .size
            .kl(&Normal::constant(&cfg.air.size_prior_loc, cfg.air.size_prior_scale, &[b, n], dt, &dev)?)?
            * &active)?
            .sum(1)?;
        let kl_desc = (s.desc.kl(&Normal::standard(&[b, n, cfg.air.desc_dim], dt, &dev)?)? * &active)?.sum(1)?;

        let a = s.objects.len();
        let horizon = if s.mot.is_some() { s.m } else { t };
        let pos_t = |i: usize| s.positions.narrow(1, i, 1);
        let mut kl_pos = pos_t(0)?.kl(&Normal::standard(&[a, 1, 2], dt, &dev)?)?.sum(1)?;
        if horizon > 1 {
            let q = s.positions.narrow(1, 1, horizon - 1)?;
            let prev = s.position_samples.narrow(1, 0, horizon - 1)?;
            let prior = Normal::with_fixed_scale(prev.detach(), cfg.find.prior_scale)?;
            kl_pos = (kl_pos + q.kl(&prior)?.sum(1)?)?;
        }
        let mut kl_mot = Tensor::zeros(a, dt, &dev)?;
        if let Some(mot) = &s.mot {
            if let Some(pred) = &mot.pred_positions {
                let q = s.positions.narrow(1, s.m, t - s.m)?;
                kl_pos = (kl_pos + q.kl(pred)?.sum(1)?)?;
            }
            let first = mot.motions.narrow(1, 0, 1)?;
            kl_mot = first
                .kl(&Normal::standard(&[a, 1, cfg.mot.motion_dim], dt, &dev)?)?
                .sum(1)?;
            if let Some(pred) = &mot.pred_motions {
                let q = mot.motions.narrow(1, 1, t - s.m)?;
                kl_mot = (kl_mot + q.kl(pred)?.sum(1)?)?;
            }
        }
        let kl_position = per_sequence(&kl_pos, &s.objects.seq, b)?;
        let kl_motion = per_sequence(&kl_mot, &s.objects.seq, b)?;
        let kl = ((((&kl_cnt + &kl_size)? + &kl_desc)? + &kl_position)? + &kl_motion)?;

        let mut records = Vec::new();
        for seq in 0..b {
            records.push(KlRecord {
                seq,
                object: None,
                time: None,
                latent: Latent::Count,
                prior: Prior::Count,
            });
        }
        for &(seq, i) in &s.objects.pairs {
            let rec = |time, latent, prior| KlRecord {
                seq,
                object: Some(i),
                time,
                latent,
                prior,
            };
            records.push(rec(None, Latent::Size, Prior::Size));
            records.push(rec(None, Latent::Description, Prior::StandardNormal));
            records.push(rec(Some(0), Latent::Position, Prior::StandardNormal));
            for tt in 1..horizon {
                records.push(rec(Some(tt), Latent::Position, Prior::PreviousPosition));
            }
            if let Some(mot) = &s.mot {
                if mot.pred_positions.is_some() {
                    for tt in s.m..t {
                        records.push(rec(Some(tt), Latent::Position, Prior::PredictedPosition));
                    }
                }
                records.push(rec(Some(s.m - 1), Latent::Motion, Prior::StandardNormal));
                if mot.pred_motions.is_some() {
                    for tt in s.m..t {
                        records.push(rec(Some(tt), Latent::Motion, Prior::PredictedMotion));
                    }
                }
            }
        }
        records.sort();
        Ok(Elbo {
            elbo: (&recon - kl)?,
            recon,
            kl_cnt,
            kl_size,
            kl_desc,
            kl_position,
            kl_motion,
            records,
        })
    }

    /// Per-frame ELBO of the intermediate inference over the first `k` frames, per sequence `[B]`.
    pub fn warm_start_elbo(&self, frames: &Tensor, scene: &SceneLatents, opts: &RunOptions) -> Result<Tensor> {
        let frames = frames.to_dtype(self.dtype())?;
        let (b, _, h, w) = frames.dims4()?;
        let k = scene.k;
        let prefix = frames.narrow(1, 0, k)?.reshape((b * k, h, w))?;
        let mask = self.mask(opts)?;
        let e = self.air.elbo(
            &prefix,
            &scene.intermediate,
            self.cfg.air.cnt_prior.loc(opts.global_step),
            mask.as_ref(),
        )?;
        Ok(e.elbo.reshape((b, k))?.sum(1)?)
    }

    /// Infers from the `S` observed frames `[B, S, H, W]`, rolls the motion
    /// model forward to `horizon` frames and renders every frame.
    ///
    /// With `sample_seed = None` every latent is replaced by its mode.
    pub fn predict(
        &self,
        frames: &Tensor,
        horizon: usize,
        rect_mode: RectMode,
        sample_seed: Option<u64>,
    ) -> Result<Vec<Prediction>> {
        let frames = frames.to_dtype(self.dtype())?;
        let (_, s) = self.check_frames(&frames)?;
        let cfg = &self.cfg;
        let need = if cfg.variant.uses_rect() { cfg.k } else { 1 }.max(if cfg.variant.uses_mot() { cfg.m } else { 1 });
        if s < need {
            return Err(Error::invalid(format!("need at least {need} observed frames, got {s}")));
        }
        if horizon < s {
            return Err(Error::invalid(format!("horizon {horizon} shorter than the {s} observed frames")));
        }
        let mut noise = match sample_seed {
            Some(seed) => Noise::seeded(seed),
            None => Noise::mode(),
        };
        let opts = RunOptions {
            rect_mode,
            ..RunOptions::eval()
        };
        match self.forward(&frames, &opts, &mut noise)? {
            Forward::Frames(f) => self.predict_frames(&f, horizon),
            Forward::Scene(sc) => self.predict_scene(&sc, horizon, sample_seed.is_none(), &mut noise),
        }
    }

    fn predict_frames(&self, f: &FrameScenes, horizon: usize) -> Result<Vec<Prediction>> {
        let n = self.cfg.air.max_objects;
        let (b, s) = (f.batch, f.len);
        let [h, w] = self.cfg.frame_hw;
        let nt = air::n_tilde_tensor(&f.inference.samples.cnt, n)?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
        let pos = f.inference.samples.position.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let mean = f.mean.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let per_frame = h * w;
        let mut out = Vec::with_capacity(b);
        for bi in 0..b {
            let n_tilde: Vec<f64> = (0..s).map(|t| nt[bi * s + t]).collect();
            let counts = n_tilde.iter().map(|v| air::rounded_count(*v, n)).collect();
            let tracks: Vec<Vec<[f64; 2]>> = (0..n)
                .map(|i| {
                    (0..horizon)
                        .map(|t| {
                            let p = &pos[bi * s + t.min(s - 1)][i];
                            [p[0], p[1]]
                        })
                        .collect()
                })
                .collect();
            let mut frames = FrameSequence::zeros(horizon, h, w);
            for t in 0..horizon {
                let src = (bi * s + t.min(s - 1)) * per_frame;
                frames.frame_mut(t).copy_from_slice(&mean[src..src + per_frame]);
            }
            out.push(Prediction {
                observed: s,
                horizon,
                n_tilde,
                counts,
                find_tracks: tracks.iter().map(|tr| tr[..s].to_vec()).collect(),
                tracks,
                frames,
            });
        }
        Ok(out)
    }

    fn predict_scene(
        &self,
        sc: &SceneLatents,
        horizon: usize,
        use_modes: bool,
        noise: &mut Noise,
    ) -> Result<Vec<Prediction>> {
        let cfg = &self.cfg;
        let n = cfg.air.max_objects;
        let s = sc.len;
        let b = sc.n_ceil.len();
        let a = sc.objects.len();
        let [h, w] = cfg.frame_hw;
        let observed = sc.position_samples.clone();
        let future = match (&sc.mot, &self.transition) {
            (Some(mot), Some(tr)) if horizon > s => {
                let p0 = observed.narrow(1, s - 1, 1)?.squeeze(1)?;
                let last = mot.motion_samples.dim(1)? - 1;
                let m0 = mot.motion_samples.narrow(1, last, 1)?.squeeze(1)?;
                Some(rollout(tr.as_ref(), &p0, &m0, horizon - s, use_modes, &mut noise.latent)?.0)
            }
            (_, _) if horizon > s => {
                let last = observed.narrow(1, s - 1, 1)?;
                Some(last.broadcast_as((a, horizon - s, 2))?.contiguous()?)
            }
            _ => None,
        };
        let all = match future {
            Some(f) => Tensor::cat(&[&observed, &f], 1)?,
            None => observed,
        };
        let steps = gather_slots(&air::split_tensor(&sc.n_tilde, n)?, &sc.objects.flat)?;
        let glimpses = self.air.decode(&gather_slots(&sc.desc_sample, &sc.objects.flat)?)?;
        let size = gather_slots(&sc.size_sample, &sc.objects.flat)?;
        let mean = render_tracks(&glimpses, &steps, &size, &all, None, &sc.objects, b, cfg.frame_hw)?;
        let mean = mean.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let all = all.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let find = sc.find.samples.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let nt = sc.n_tilde.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let per_seq = horizon * h * w;
        let mut out: Vec<Prediction> = (0..b)
            .map(|bi| Prediction {
                observed: s,
                horizon,
                n_tilde: vec![nt[bi]],
                counts: vec![air::rounded_count(nt[bi], n)],
                tracks: Vec::new(),
                find_tracks: Vec::new(),
                frames: FrameSequence {
                    t: horizon,
                    h,
                    w,
                    data: mean[bi * per_seq..(bi + 1) * per_seq].to_vec(),
                },
            })
            .collect();
        for (obj, &(bi, _)) in sc.objects.pairs.iter().enumerate() {
            out[bi].tracks.push(all[obj].iter().map(|p| [p[0], p[1]]).collect());
            out[bi].find_tracks.push(find[obj].iter().map(|p| [p[0], p[1]]).collect());
        }
        Ok(out)
    }
}
