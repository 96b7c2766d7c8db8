//! Motion state-space model: motion inference from a position history,
//! Markov transitions, and fusion of predictions with inferred states.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, GaussianHead, Lstm, Mlp, ParamPath, Squash};
use crate::prob::{fuse_tensors, fuse_weighted, DiagGaussian, Normal, Sampler};

/// Fusion weight of the prediction: uniform in an interval while training, fixed at test time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionPolicy {
    pub train_interval: [f64; 2],
    pub test_w: f64,
}

impl Default for FusionPolicy {
    fn default() -> Self {
        Self {
            train_interval: [0.01, 0.99],
            test_w: 0.5,
        }
    }
}

impl FusionPolicy {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.train_interval;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) || !(0.0..=1.0).contains(&self.test_w) {
            return Err(Error::Config(format!("invalid fusion policy {self:?}")));
        }
        Ok(())
    }

    pub fn draw(&self, training: bool, rng: &mut Sampler) -> f64 {
        if training {
            rng.uniform(self.train_interval[0], self.train_interval[1])
        } else {
            self.test_w
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotConfig {
    pub motion_dim: usize,
    pub lstm_hidden: usize,
    pub head_hidden: usize,
    pub transition_mlp: Vec<usize>,
    pub transition_head: usize,
    pub fusion: FusionPolicy,
}

impl Default for MotConfig {
    fn default() -> Self {
        Self {
            motion_dim: 10,
            lstm_hidden: 64,
            head_hidden: 32,
            transition_mlp: vec![64, 64],
            transition_head: 32,
            fusion: FusionPolicy::default(),
        }
    }
}

/// Markov transition of `(position, motion)` samples to predicted Gaussians.
pub trait Transition: std::fmt::Debug + Send + Sync {
    /// `position [A, 2]`, `motion [A, m]` -> `(position [A, 2], motion [A, m])` predictions.
    fn transition(&self, position: &Tensor, motion: &Tensor) -> Result<(Normal, Normal)>;
}

/// Learned transition: two independent networks on `[position, motion]`.
#[derive(Debug, Clone)]
pub struct TransitionNet {
    pos_mlp: Mlp,
    pos_head: GaussianHead,
    mot_mlp: Mlp,
    mot_head: GaussianHead,
}

impl TransitionNet {
    pub fn new(cfg: &MotConfig, p: ParamPath) -> Result<Self> {
        let input = 2 + cfg.motion_dim;
        let pos_mlp = Mlp::new(input, &cfg.transition_mlp, Activation::Tanh, p.pp("pos"))?;
        let mot_mlp = Mlp::new(input, &cfg.transition_mlp, Activation::Tanh, p.pp("mot"))?;
        let hidden = pos_mlp.out_dim(input);
        Ok(Self {
            pos_head: GaussianHead::new(
                hidden,
                cfg.transition_head,
                2,
                Activation::Tanh,
                Squash::None,
                p.pp("pos.head"),
            )?,
            mot_head: GaussianHead::new(
                hidden,
                cfg.transition_head,
                cfg.motion_dim,
                Activation::Tanh,
                Squash::None,
                p.pp("mot.head"),
            )?,
            pos_mlp,
            mot_mlp,
        })
    }
}

impl Transition for TransitionNet {
    fn transition(&self, position: &Tensor, motion: &Tensor) -> Result<(Normal, Normal)> {
        let x = Tensor::cat(&[position, motion], D::Minus1)?;
        Ok((
            self.pos_head.forward(&self.pos_mlp.forward(&x)?)?,
            self.mot_head.forward(&self.mot_mlp.forward(&x)?)?,
        ))
    }
}

/// Hand-set constant-velocity transition: the first two motion coordinates
/// are a per-step displacement and the motion is carried over unchanged.
#[derive(Debug, Clone, Copy)]
pub struct ConstantVelocity {
    pub scale: f64,
}

impl Transition for ConstantVelocity {
    fn transition(&self, position: &Tensor, motion: &Tensor) -> Result<(Normal, Normal)> {
        let v = motion.narrow(D::Minus1, 0, 2)?;
        Ok((
            Normal::with_fixed_scale((position + v)?, self.scale)?,
            Normal::with_fixed_scale(motion.clone(), self.scale)?,
        ))
    }
}

/// Motion inference recurrence over `[size, description, position_t]`.
#[derive(Debug, Clone)]
pub struct MotionNet {
    lstm: Lstm,
    head: GaussianHead,
}

impl MotionNet {
    pub fn new(cfg: &MotConfig, desc_dim: usize, p: ParamPath) -> Result<Self> {
        let lstm = Lstm::new(4 + desc_dim, cfg.lstm_hidden, p.pp("lstm"))?;
        let head = GaussianHead::new(
            cfg.lstm_hidden,
            cfg.head_hidden,
            cfg.motion_dim,
            Activation::Tanh,
            Squash::None,
            p.pp("head"),
        )?;
        Ok(Self { lstm, head })
    }

    /// Inferred motions for steps `M..=T` (1-based) as `[A, T - M + 1, m]`.
    ///
    /// `positions [A, T, 2]`, `size [A, 2]`, `desc [A, d]`.
    pub fn infer_motion(&self, positions: &Tensor, size: &Tensor, desc: &Tensor, m: usize) -> Result<Normal> {
        let (a, t, _) = positions.dims3()?;
        if m == 0 || t < m {
            return Err(Error::invalid(format!("motion prefix {m} invalid for {t} steps")));
        }
        let stat = Tensor::cat(&[size, desc], D::Minus1)?;
        let stat = stat.unsqueeze(1)?.broadcast_as((a, t, stat.dim(1)?))?;
        let x = Tensor::cat(&[&stat, positions], D::Minus1)?;
        let h = self.lstm.run(&x, false)?.narrow(1, m - 1, t - m + 1)?;
        self.head.forward(&h)
    }
}

/// `fuse_weighted([pred, inferred], [w, 1 - w])`.
pub fn fuse_step(pred: &DiagGaussian, inferred: &DiagGaussian, w: f64) -> Result<DiagGaussian> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("fusion weight {w} outside [0, 1]")));
    }
    fuse_weighted(&[pred.clone(), inferred.clone()], &[w, 1.0 - w])
}

/// Batched fusion with one weight per row: `w [A]`.
pub fn fuse_rows(pred: &Normal, inferred: &Normal, w: &Tensor) -> Result<Normal> {
    let one_minus = w.affine(-1.0, 1.0)?;
    fuse_tensors(&[pred, inferred], &[w.clone(), one_minus])
}

/// Outputs of the motion pipeline for `A` objects over `T` steps.
#[derive(Debug, Clone)]
pub struct MotOutput {
    /// Final positions `[A, T, 2]`.
    pub positions: Normal,
    pub position_samples: Tensor,
    /// Final motions for steps `M..=T`: `[A, T - M + 1, m]`.
    pub motions: Normal,
    pub motion_samples: Tensor,
    /// Predicted (pre-fusion) Gaussians for steps `M+1..=T`: `[A, T - M, ·]`, absent when `T == M`.
    pub pred_positions: Option<Normal>,
    pub pred_motions: Option<Normal>,
    /// Fusion weights per step `M+1..=T`, each `[A]`.
    pub weights: Vec<Tensor>,
}

/// Runs the fusion loop.
///
/// `inferred_pos [A, T, 2]` with its samples, `inferred_motion [A, T - M + 1, m]`.
#[allow(clippy::too_many_arguments)]
pub fn mot_pipeline(
    inferred_pos: &Normal,
    inferred_pos_samples: &Tensor,
    inferred_motion: &Normal,
    m: usize,
    transition: &dyn Transition,
    policy: &FusionPolicy,
    training: bool,
    sampler: &mut Sampler,
    weights: &mut Sampler,
) -> Result<MotOutput> {
    let (a, t, _) = inferred_pos.loc.dims3()?;
    if m == 0 || t < m {
        return Err(Error::invalid(format!("motion prefix {m} invalid for {t} steps")));
    }
    let (dt, dev) = (inferred_pos.loc.dtype(), inferred_pos.loc.device().clone());
    let mut pos: Vec<Normal> = (0..m).map(|i| inferred_pos.narrow(1, i, 1)).collect::<Result<_>>()?;
    let mut pos_s: Vec<Tensor> = vec![inferred_pos_samples.narrow(1, 0, m)?];
    let mot_m = inferred_motion.narrow(1, 0, 1)?;
    let mut mot = vec![mot_m.clone()];
    let mut mot_s = vec![sampler.draw(&mot_m)?];
    let mut prev_p = inferred_pos_samples.narrow(1, m - 1, 1)?.squeeze(1)?;
    let mut prev_m = mot_s[0].squeeze(1)?;
    let mut preds_p = Vec::new();
    let mut preds_m = Vec::new();
    let mut ws = Vec::new();
    for i in m..t {
        let (pp, pm) = transition.transition(&prev_p, &prev_m)?;
        let w: Vec<f64> = (0..a).map(|_| policy.draw(training, weights)).collect();
        let w = Tensor::from_vec(w, a, &dev)?.to_dtype(dt)?;
        let ip = inferred_pos.narrow(1, i, 1)?.squeeze_event()?;
        let im = inferred_motion.narrow(1, i - m + 1, 1)?.squeeze_event()?;
        let fp = fuse_rows(&pp, &ip, &w)?;
        let fm = fuse_rows(&pm, &im, &w)?;
        prev_p = sampler.draw(&fp)?;
        prev_m = sampler.draw(&fm)?;
        pos.push(fp.unsqueeze_event()?);
        pos_s.push(prev_p.unsqueeze(1)?);
        mot.push(fm.unsqueeze_event()?);
        mot_s.push(prev_m.unsqueeze(1)?);
        preds_p.push(pp);
        preds_m.push(pm);
        ws.push(w);
    }
    let cat = |v: &[Normal]| -> Result<Normal> {
        let locs: Vec<_> = v.iter().map(|n| n.loc.clone()).collect();
        let scales: Vec<_> = v.iter().map(|n| n.scale.clone()).collect();
        Normal::new(Tensor::cat(&locs, 1)?, Tensor::cat(&scales, 1)?)
    };
    Ok(MotOutput {
        positions: cat(&pos)?,
        position_samples: Tensor::cat(&pos_s, 1)?,
        motions: cat(&mot)?,
        motion_samples: Tensor::cat(&mot_s, 1)?,
        pred_positions: if preds_p.is_empty() { None } else { Some(Normal::stack(&preds_p, 1)?) },
        pred_motions: if preds_m.is_empty() { None } else { Some(Normal::stack(&preds_m, 1)?) },
        weights: ws,
    })
}

/// Generative rollout of `steps` transitions from `position [A, 2]`, `motion [A, m]`.
///
/// Returns predicted positions `[A, steps, 2]` (samples, or modes when
/// `use_modes`) together with the predicted position Gaussians.
pub fn rollout(
    transition: &dyn Transition,
    position: &Tensor,
    motion: &Tensor,
    steps: usize,
    use_modes: bool,
    sampler: &mut Sampler,
) -> Result<(Tensor, Vec<Normal>)> {
    let a = position.dim(0)?;
    if steps == 0 {
        return Ok((Tensor::zeros((a, 0, 2), position.dtype(), position.device())?, Vec::new()));
    }
    let mut p = position.clone();
    let mut m = motion.clone();
    let mut out = Vec::with_capacity(steps);
    let mut dists = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (pp, pm) = transition.transition(&p, &m)?;
        if use_modes {
            p = pp.mode().clone();
            m = pm.mode().clone();
        } else {
            p = sampler.draw(&pp)?;
            m = sampler.draw(&pm)?;
        }
        out.push(p.clone());
        dists.push(pp);
    }
    Ok((Tensor::stack(&out, 1)?, dists))
}

trait EventAxis: Sized {
    fn squeeze_event(&self) -> Result<Self>;
    fn unsqueeze_event(&self) -> Result<Self>;
}

impl EventAxis for Normal {
    /// `[A, 1, d] -> [A, d]`
    fn squeeze_event(&self) -> Result<Self> {
        Normal::new(self.loc.squeeze(1)?, self.scale.squeeze(1)?)
    }

    fn unsqueeze_event(&self) -> Result<Self> {
        Normal::new(self.loc.unsqueeze(1)?, self.scale.unsqueeze(1)?)
    }
}
