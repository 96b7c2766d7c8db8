//! Description-conditioned tracking of a known object through frames.
//!
//! Each object's description is translated once into a bank of
//! convolution kernels. Every frame is convolved with that bank, then with
//! globally shared layers, and a small head turns the features plus the
//! previous position into a position posterior.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{im2col, max_pool2, Activation, Conv2d, GaussianHead, Linear, Mlp, Padding, ParamPath, Squash};
use crate::prob::{Normal, Sampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FindConfig {
    pub n_kernels: usize,
    pub kernel: usize,
    pub kernel_mlp: Vec<usize>,
    pub conv_channels: [usize; 2],
    pub conv_kernels: [usize; 2],
    pub dense: Vec<usize>,
    pub features: usize,
    pub pos_mlp: Vec<usize>,
    pub pos_head: usize,
    pub prior_scale: f64,
}

impl Default for FindConfig {
    fn default() -> Self {
        Self {
            n_kernels: 8,
            kernel: 10,
            kernel_mlp: vec![128, 256],
            conv_channels: [16, 32],
            conv_kernels: [5, 3],
            dense: vec![128, 64],
            features: 50,
            pos_mlp: vec![64, 64],
            pos_head: 32,
            prior_scale: 0.1,
        }
    }
}

/// Per-object convolution kernels `[A, n_k, k, k]` (single input channel).
#[derive(Debug, Clone)]
pub struct KernelBank {
    pub kernels: Tensor,
}

impl KernelBank {
    pub fn len(&self) -> usize {
        self.kernels.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Positions inferred along a track.
#[derive(Debug, Clone)]
pub struct Track {
    /// `[A, T, 2]`
    pub posterior: Normal,
    /// `[A, T, 2]`
    pub samples: Tensor,
}

#[derive(Debug, Clone)]
pub struct FindNet {
    cfg: FindConfig,
    hw: [usize; 2],
    ker_mlp: Mlp,
    ker_out: Linear,
    convs: [Conv2d; 2],
    dense: Mlp,
    feat_out: Linear,
    pos_mlp: Mlp,
    pos_head: GaussianHead,
    derivations: Arc<AtomicUsize>,
}

impl FindNet {
    pub fn new(cfg: &FindConfig, desc_dim: usize, frame_hw: [usize; 2], p: ParamPath) -> Result<Self> {
        let [h, w] = frame_hw;
        if h < 4 || w < 4 {
            return Err(Error::Config(format!("frame {h}x{w} too small for tracking")));
        }
        let bank = cfg.n_kernels * cfg.kernel * cfg.kernel;
        let ker_mlp = Mlp::new(desc_dim, &cfg.kernel_mlp, Activation::Relu, p.pp("ker"))?;
        let ker_out = Linear::new(ker_mlp.out_dim(desc_dim), bank, p.pp("ker.out"))?;
        let [c0, c1] = cfg.conv_channels;
        let [k0, k1] = cfg.conv_kernels;
        let convs = [
            Conv2d::new(cfg.n_kernels, c0, k0, Padding::same(k0, k0), p.pp("conv0"))?,
            Conv2d::new(c0, c1, k1, Padding::same(k1, k1), p.pp("conv1"))?,
        ];
        let flat = c1 * (h / 4) * (w / 4);
        let dense = Mlp::new(flat, &cfg.dense, Activation::Relu, p.pp("dense"))?;
        let feat_out = Linear::new(dense.out_dim(flat), cfg.features, p.pp("features"))?;
        let pos_in = cfg.features + 2;
        let pos_mlp = Mlp::new(pos_in, &cfg.pos_mlp, Activation::Tanh, p.pp("pos"))?;
        let pos_head = GaussianHead::new(
            pos_mlp.out_dim(pos_in),
            cfg.pos_head,
            2,
            Activation::Tanh,
            Squash::Tanh,
            p.pp("pos.head"),
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            hw: frame_hw,
            ker_mlp,
            ker_out,
            convs,
            dense,
            feat_out,
            pos_mlp,
            pos_head,
            derivations: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn config(&self) -> &FindConfig {
        &self.cfg
    }

    /// Number of per-object kernel banks derived so far.
    pub fn kernel_derivations(&self) -> usize {
        self.derivations.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.derivations.store(0, Ordering::Relaxed);
    }

    /// Kernel banks for description samples `[A, d]`.
    pub fn derive_kernels(&self, desc: &Tensor) -> Result<KernelBank> {
        let a = desc.dim(0)?;
        self.derivations.fetch_add(a, Ordering::Relaxed);
        let k = self.cfg.kernel;
        let out = self.ker_out.forward(&self.ker_mlp.forward(desc)?)?;
        Ok(KernelBank {
            kernels: out.reshape((a, self.cfg.n_kernels, k, k))?,
        })
    }

    /// Frame features `[A, T, F]` for frames `[B, T, H, W]`; object `a`
    /// reads sequence `seq_index[a]` and uses bank row `a`.
    pub fn features(&self, frames: &Tensor, seq_index: &Tensor, bank: &KernelBank) -> Result<Tensor> {
        let (b, t, h, w) = frames.dims4()?;
        if [h, w] != self.hw {
            return Err(Error::invalid(format!(
                "frame {h}x{w} does not match the network's {}x{}",
                self.hw[0], self.hw[1]
            )));
        }
        let a = bank.len();
        let k = self.cfg.kernel;
        let nk = self.cfg.n_kernels;
        let cols = im2col(&frames.reshape((b * t, 1, h, w))?, k, k, Padding::same(k, k))?
            .reshape((b, t * h * w, k * k))?
            .index_select(seq_index, 0)?;
        let kt = bank.kernels.reshape((a, nk, k * k))?.transpose(1, 2)?;
        let x = cols
            .matmul(&kt)?
            .reshape((a * t, h * w, nk))?
            .transpose(1, 2)?
            .reshape((a * t, nk, h, w))?
            .relu()?;
        let x = max_pool2(&self.convs[0].forward(&x)?.relu()?)?;
        let x = max_pool2(&self.convs[1].forward(&x)?.relu()?)?;
        let f = self.feat_out.forward(&self.dense.forward(&x.flatten_from(1)?)?)?;
        Ok(f.reshape((a, t, self.cfg.features))?)
    }

    /// Position posterior from features `[A, F]` and previous positions `[A, 2]`.
    pub fn find_step(&self, features: &Tensor, prev_position: &Tensor) -> Result<Normal> {
        let x = Tensor::cat(&[features, prev_position], D::Minus1)?;
        self.pos_head.forward(&self.pos_mlp.forward(&x)?)
    }

    /// Sequential tracking over precomputed features `[A, T, F]`, starting from `init [A, 2]`.
    pub fn track_features(&self, features: &Tensor, init: &Tensor, sampler: &mut Sampler) -> Result<Track> {
        let (_, t, _) = features.dims3()?;
        let mut prev = init.clone();
        let mut dists = Vec::with_capacity(t);
        let mut samples = Vec::with_capacity(t);
        for i in 0..t {
            let f = features.narrow(1, i, 1)?.squeeze(1)?;
            let q = self.find_step(&f, &prev)?;
            prev = sampler.draw(&q)?;
            dists.push(q);
            samples.push(prev.clone());
        }
        Ok(Track {
            posterior: Normal::stack(&dists, 1)?,
            samples: Tensor::stack(&samples, 1)?,
        })
    }

    /// Derives kernels from `desc [A, d]` and tracks each object from the zero position.
    pub fn find_track(
        &self,
        frames: &Tensor,
        seq_index: &Tensor,
        desc: &Tensor,
        sampler: &mut Sampler,
    ) -> Result<Track> {
        let bank = self.derive_kernels(desc)?;
        let feats = self.features(frames, seq_index, &bank)?;
        let init = Tensor::zeros((bank.len(), 2), frames.dtype(), frames.device())?;
        self.track_features(&feats, &init, sampler)
    }

    /// Prior of the position following `prev_sample`: centered on it, no gradient through the mean.
    pub fn step_prior(&self, prev_sample: &Tensor) -> Result<Normal> {
        Normal::with_fixed_scale(prev_sample.detach(), self.cfg.prior_scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn small() -> FindConfig {
        FindConfig {
            n_kernels: 2,
            kernel: 3,
            kernel_mlp: vec![8, 8],
            conv_channels: [3, 4],
            conv_kernels: [3, 3],
            dense: vec![8, 8],
            features: 5,
            pos_mlp: vec![8, 8],
            pos_head: 4,
            prior_scale: 0.1,
        }
    }

    #[test]
    fn kernel_bank_shape_and_determinism() -> Result<()> {
        let store = ParamStore::new(DType::F64, 3);
        let net = FindNet::new(&FindConfig::default(), 20, [16, 16], store.root())?;
        let d = Tensor::ones((1, 20), DType::F64, &Device::Cpu)?;
        let a = net.derive_kernels(&d)?;
        let b = net.derive_kernels(&d)?;
        assert_eq!(a.kernels.dims(), &[1, 8, 10, 10]);
        let diff = (a.kernels - b.kernels)?.abs()?.sum_all()?.to_scalar::<f64>()?;
        assert_eq!(diff, 0.0);
        assert_eq!(net.kernel_derivations(), 2);
        Ok(())
    }

    #[test]
    fn zero_final_layer_gives_zero_bank() -> Result<()> {
        let store = ParamStore::new(DType::F64, 3);
        let net = FindNet::new(&small(), 4, [8, 8], store.root())?;
        for (name, v) in store.vars() {
            if name.starts_with("ker.out") {
                v.set(&v.zeros_like()?)?;
            }
        }
        let bank = net.derive_kernels(&Tensor::zeros((2, 4), DType::F64, &Device::Cpu)?)?;
        assert_eq!(bank.kernels.abs()?.sum_all()?.to_scalar::<f64>()?, 0.0);
        Ok(())
    }

    #[test]
    fn track_shapes() -> Result<()> {
        let store = ParamStore::new(DType::F64, 4);
        let net = FindNet::new(&small(), 4, [8, 8], store.root())?;
        let frames = Tensor::rand(0f64, 1.0, (2, 3, 8, 8), &Device::Cpu)?;
        let seq = Tensor::new(&[0u32, 1, 1], &Device::Cpu)?;
        let desc = Tensor::zeros((3, 4), DType::F64, &Device::Cpu)?;
        let tr = net.find_track(&frames, &seq, &desc, &mut Sampler::seeded(1))?;
        assert_eq!(tr.posterior.loc.dims(), &[3, 3, 2]);
        assert_eq!(tr.samples.dims(), &[3, 3, 2]);
        let q = tr.posterior.narrow(1, 0, 1)?;
        assert!(q.scale.flatten_all()?.to_vec1::<f64>()?.iter().all(|s| *s > 0.0));
        Ok(())
    }

    #[test]
    fn posterior_equal_to_prior_has_zero_kl() -> Result<()> {
        let store = ParamStore::new(DType::F64, 4);
        let net = FindNet::new(&small(), 4, [8, 8], store.root())?;
        let prev = Tensor::new(&[[0.2f64, -0.4]], &Device::Cpu)?;
        let prior = net.step_prior(&prev)?;
        let kl = prior.clone().kl(&prior)?.to_vec1::<f64>()?;
        assert_eq!(kl, vec![0.0]);
        Ok(())
    }
}
