//! Curriculum training loop with gradient clipping, metrics log and checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{child_seed, Dataset};
use crate::error::{Error, Result};
use crate::model::{Forward, Noise, RunOptions, Variant, Vtssi, VtssiConfig};
use crate::schedule::{Curriculum, LrSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Defaults to the variant's schedule.
    pub curriculum: Option<Curriculum>,
    /// Curriculum stages during which the per-frame objective is added (full model only).
    pub warm_start_stages: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 64,
            lr: LrSchedule::default(),
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            curriculum: None,
            warm_start_stages: 3,
            log_every: 10,
            checkpoint_every: 1_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size, log_every and checkpoint_every must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub elbo: f64,
    /// ELBO divided by the curriculum length.
    pub elbo_per_frame: f64,
    pub recon: f64,
    pub kl_cnt: f64,
    pub kl_size: f64,
    pub kl_desc: f64,
    pub kl_position: f64,
    pub kl_motion: f64,
    pub warm_start: Option<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub curriculum_len: usize,
}

#[derive(Debug)]
pub struct Trainer {
    model: Vtssi,
    cfg: TrainConfig,
    curriculum: Curriculum,
    opt: AdamW,
    step: u64,
    noise: Noise,
    order_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

fn global_norm(grads: &GradStore, vars: &[candle_core::Var]) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.to_dtype(candle_core::DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

impl Trainer {
    pub fn new(model: Vtssi, cfg: TrainConfig) -> Result<Self> {
        Self::resume(model, cfg, 0)
    }

    /// Continues from `global_step` with fresh optimizer moments.
    pub fn resume(model: Vtssi, cfg: TrainConfig, global_step: u64) -> Result<Self> {
        cfg.validate()?;
        let params = ParamsAdamW {
            lr: cfg.lr.at(global_step),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: 0.0,
        };
        let opt = AdamW::new(model.store().all_vars(), params)?;
        let curriculum = cfg
            .curriculum
            .unwrap_or_else(|| Curriculum::for_variant(model.config().variant));
        let stream = child_seed(cfg.seed, 2).wrapping_add(global_step);
        Ok(Self {
            noise: Noise::seeded(stream),
            order_rng: ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, 3).wrapping_add(global_step)),
            order: Vec::new(),
            cursor: 0,
            curriculum,
            model,
            cfg,
            opt,
            step: global_step,
        })
    }

    pub fn model(&self) -> &Vtssi {
        &self.model
    }

    pub fn into_model(self) -> Vtssi {
        self.model
    }

    pub fn global_step(&self) -> u64 {
        self.step
    }

    pub fn curriculum(&self) -> Curriculum {
        self.curriculum
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        while out.len() < self.cfg.batch_size.min(n) {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.order_rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One gradient step on a fresh mini-batch.
    pub fn step(&mut self, data: &Dataset) -> Result<MetricsRecord> {
        let mcfg = self.model.config().clone();
        if data.seq_len() < mcfg.t {
            return Err(Error::invalid(format!(
                "sequences of length {} shorter than T = {}",
                data.seq_len(),
                mcfg.t
            )));
        }
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let step = self.step;
        let len = self.curriculum.len(step, mcfg.t);
        let indices = self.next_batch(data.len());
        let frames = data.batch(&indices, len, self.model.dtype())?;
        let opts = RunOptions::train(step);
        let fwd = self.model.forward(&frames, &opts, &mut self.noise)?;
        let elbo = self.model.compute_elbo(&frames, &fwd, step)?;
        let mut objective = elbo.elbo.mean_all()?;
        let mut warm = None;
        if mcfg.variant == Variant::Vtssi && self.curriculum.stage(step) < self.cfg.warm_start_stages {
            if let Forward::Scene(scene) = &fwd {
                let w = self.model.warm_start_elbo(&frames, scene, &opts)?.mean_all()?;
                warm = Some(w.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?);
                objective = (objective + w)?;
            }
        }
        let loss = objective.neg()?;
        let summary = elbo.summary()?;
        let loss_v = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        let dump = |what: &str| Error::NonFinite {
            step,
            batch: (step as usize * self.cfg.batch_size) / data.len().max(1),
            terms: format!("{what}; sequences {indices:?}; terms {summary:?}; warm start {warm:?}"),
        };
        if !loss_v.is_finite() {
            return Err(dump("loss"));
        }
        let vars = self.model.store().all_vars();
        let mut grads = loss.backward()?;
        let norm = global_norm(&grads, &vars)?;
        if !norm.is_finite() {
            return Err(dump("gradient norm"));
        }
        if norm > self.cfg.clip_norm {
            let scale = self.cfg.clip_norm / norm;
            for v in &vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
        let lr = self.cfg.lr.at(step);
        self.opt.set_learning_rate(lr);
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(MetricsRecord {
            step,
            elbo: summary.elbo,
            elbo_per_frame: summary.elbo / len as f64,
            recon: summary.recon,
            kl_cnt: summary.kl_cnt,
            kl_size: summary.kl_size,
            kl_desc: summary.kl_desc,
            kl_position: summary.kl_position,
            kl_motion: summary.kl_motion,
            warm_start: warm,
            loss: loss_v,
            grad_norm: norm,
            lr,
            curriculum_len: len,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, self.step)
    }
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub last: PathBuf,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

/// Trains from scratch (or from `resume`) until `cfg.steps`, appending to
/// `run_dir/metrics.jsonl` and writing `run_dir/checkpoints/*.ckpt` plus `run_dir/last.ckpt`.
pub fn train(
    data: &Dataset,
    model_cfg: &VtssiConfig,
    cfg: &TrainConfig,
    run_dir: &Path,
    resume: Option<&Checkpoint>,
    mut progress: impl FnMut(&MetricsRecord),
) -> Result<RunFiles> {
    if data.frame_hw() != model_cfg.frame_hw {
        return Err(Error::Config(format!(
            "dataset frames {:?} do not match model frames {:?}",
            data.frame_hw(),
            model_cfg.frame_hw
        )));
    }
    let ck_dir = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ck_dir)?;
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(ck.restore()?, cfg.clone(), ck.global_step)?,
        None => Trainer::new(Vtssi::new(model_cfg, child_seed(cfg.seed, 1))?, cfg.clone())?,
    };
    let metrics = run_dir.join("metrics.jsonl");
    let file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&metrics)?
    } else {
        File::create(&metrics)?
    };
    let mut log = BufWriter::new(file);
    let mut checkpoints = Vec::new();
    while trainer.global_step() < cfg.steps {
        let rec = trainer.step(data)?;
        if rec.step % cfg.log_every == 0 || trainer.global_step() == cfg.steps {
            serde_json::to_writer(&mut log, &rec)?;
            log.write_all(b"\n")?;
            log.flush()?;
            progress(&rec);
        }
        if trainer.global_step() % cfg.checkpoint_every == 0 || trainer.global_step() == cfg.steps {
            let path = ck_dir.join(checkpoint_name(trainer.global_step()));
            trainer.checkpoint().save(&path)?;
            checkpoints.push(path);
        }
    }
    let last = run_dir.join("last.ckpt");
    trainer.checkpoint().save(&last)?;
    Ok(RunFiles {
        metrics,
        checkpoints,
        last,
    })
}

/// Reads a metrics log written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Mean of `field` over records with `lo <= step < hi`.
pub fn window_mean(records: &[MetricsRecord], lo: u64, hi: u64, field: impl Fn(&MetricsRecord) -> f64) -> Option<f64> {
    let v: Vec<f64> = records
        .iter()
        .filter(|r| r.step >= lo && r.step < hi)
        .map(field)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
