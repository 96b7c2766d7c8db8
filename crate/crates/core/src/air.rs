//! Single-frame scene model with a continuous object count.
//!
//! Inference always fills all `N` object slots; the count decides how many
//! of them reach the generated frame and how strongly.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, regularization_kernel, MIN_BOX_SIZE};
use crate::nn::{
    dropout, max_pool2, Activation, Conv2d, GaussianHead, Linear, Lstm, Mlp, Padding, ParamPath, Squash,
};
use crate::prob::{Normal, Sampler};
use crate::schedule::{CntPriorSchedule, FlattenSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AirConfig {
    pub max_objects: usize,
    pub glimpse: usize,
    pub desc_dim: usize,
    pub sigma_l: f64,
    pub size_prior_loc: [f64; 2],
    pub size_prior_scale: f64,
    pub cnt_prior: CntPriorSchedule,
    pub sigma_k: f64,
    pub flatten: FlattenSchedule,
    pub loc_dropout: f64,
    pub nets: AirNets,
}

impl Default for AirConfig {
    fn default() -> Self {
        Self {
            max_objects: 2,
            glimpse: 25,
            desc_dim: 20,
            sigma_l: 0.3,
            size_prior_loc: [0.3, 0.4],
            size_prior_scale: 0.1,
            cnt_prior: CntPriorSchedule::default(),
            sigma_k: 0.5,
            flatten: FlattenSchedule::default(),
            loc_dropout: 0.4,
            nets: AirNets::default(),
        }
    }
}

impl AirConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_objects == 0 {
            return bad("max_objects must be positive");
        }
        if self.glimpse < 2 {
            return bad("glimpse must be at least 2");
        }
        if self.desc_dim == 0 {
            return bad("desc_dim must be positive");
        }
        if !(self.sigma_l > 0.0 && self.size_prior_scale > 0.0 && self.sigma_k > 0.0) {
            return bad("scales must be positive");
        }
        if !(0.0..1.0).contains(&self.loc_dropout) {
            return bad("loc_dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Layer widths of the AIR networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AirNets {
    pub cnt_channels: usize,
    pub cnt_kernels: [usize; 3],
    pub cnt_pad: usize,
    pub cnt_dense: Vec<usize>,
    pub pre_channels: usize,
    pub pre_kernel: usize,
    pub loc_hidden: usize,
    pub loc_head: usize,
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
}

impl Default for AirNets {
    fn default() -> Self {
        Self {
            cnt_channels: 16,
            cnt_kernels: [5, 4, 3],
            cnt_pad: 3,
            cnt_dense: vec![256, 128],
            pre_channels: 16,
            pre_kernel: 3,
            loc_hidden: 256,
            loc_head: 64,
            encoder: vec![256, 128],
            decoder: vec![128, 256],
        }
    }
}

/// Splits a continuous count into per-slot step weights.
///
/// ```
/// let s = vtssi::air::split_count(2.4, 4).unwrap();
/// assert_eq!(s[..2], [1.0, 1.0]);
/// assert!((s[2] - 0.4).abs() < 1e-12);
/// assert_eq!(s[3], 0.0);
/// ```
pub fn split_count(n_tilde: f64, n: usize) -> Result<Vec<f64>> {
    if !(n_tilde > 0.0 && n_tilde < n as f64) {
        return Err(Error::invalid(format!("count {n_tilde} outside (0, {n})")));
    }
    Ok((0..n).map(|i| (n_tilde - i as f64).clamp(0.0, 1.0)).collect())
}

/// `(n_tilde, n_ceil)` from a count-latent value; `n_ceil >= 1`.
pub fn count_from_latent(cnt: f64, n: usize) -> (f64, usize) {
    let nt = n as f64 / (1.0 + (-cnt).exp());
    (nt, ceil_count(nt, n))
}

pub(crate) fn ceil_count(n_tilde: f64, n: usize) -> usize {
    (n_tilde.ceil() as usize).clamp(1, n)
}

/// Integer count reported at evaluation time.
pub fn rounded_count(n_tilde: f64, n: usize) -> usize {
    (n_tilde.round() as usize).min(n)
}

/// `N * sigmoid(cnt)` for a `[B, 1]` count sample, as `[B]`.
pub fn n_tilde_tensor(cnt: &Tensor, n: usize) -> Result<Tensor> {
    Ok((candle_nn::ops::sigmoid(&cnt.flatten_all()?)? * n as f64)?)
}

/// Step weights `[B, N]` from `n_tilde [B]`.
pub fn split_tensor(n_tilde: &Tensor, n: usize) -> Result<Tensor> {
    let idx = Tensor::arange(0u32, n as u32, n_tilde.device())?
        .to_dtype(n_tilde.dtype())?
        .unsqueeze(0)?;
    Ok(n_tilde.unsqueeze(1)?.broadcast_sub(&idx)?.clamp(0.0, 1.0)?)
}

/// Per-sequence ceilings from `n_tilde [B]`.
pub fn ceil_counts(n_tilde: &Tensor, n: usize) -> Result<Vec<usize>> {
    Ok(n_tilde
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?
        .into_iter()
        .map(|v| ceil_count(v, n))
        .collect())
}

/// `[B, N]` indicator of slots below each ceiling.
pub fn active_mask(n_ceil: &[usize], n: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let v: Vec<f64> = n_ceil
        .iter()
        .flat_map(|&c| (0..n).map(move |i| if i < c { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(v, (n_ceil.len(), n), dev)?.to_dtype(dtype)?)
}

/// Sizes fed to the transformer: bounded away from zero.
pub fn box_size(size: &Tensor) -> Result<Tensor> {
    Ok(((size - MIN_BOX_SIZE)?.relu()? + MIN_BOX_SIZE)?)
}

/// Posterior distributions of one frame (slots along axis 1).
#[derive(Debug, Clone)]
pub struct AirLatents {
    /// `[B, 1]`
    pub cnt: Normal,
    /// `[B, N, 2]`
    pub size: Normal,
    /// `[B, N, 2]`
    pub position: Normal,
    /// `[B, N, d]`
    pub desc: Normal,
}

/// One reparameterized sample of every latent in [`AirLatents`].
#[derive(Debug, Clone)]
pub struct AirSamples {
    pub cnt: Tensor,
    pub size: Tensor,
    pub position: Tensor,
    pub desc: Tensor,
}

#[derive(Debug, Clone)]
pub struct AirInference {
    pub latents: AirLatents,
    pub samples: AirSamples,
    /// Encoder inputs `[B, N, g, g]`.
    pub glimpses: Tensor,
}

/// Per-frame ELBO terms, each `[B]`.
#[derive(Debug, Clone)]
pub struct AirElbo {
    pub elbo: Tensor,
    pub recon: Tensor,
    pub kl_cnt: Tensor,
    pub kl_size: Tensor,
    pub kl_position: Tensor,
    pub kl_desc: Tensor,
    pub n_ceil: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AirNet {
    cfg: AirConfig,
    hw: [usize; 2],
    cnt_convs: Vec<Conv2d>,
    cnt_mlp: Mlp,
    cnt_head: GaussianHead,
    pre_convs: Vec<Conv2d>,
    loc_lstm: Lstm,
    size_head: GaussianHead,
    pos_head: GaussianHead,
    encoder: Mlp,
    desc_head: GaussianHead,
    decoder: Mlp,
    dec_out: Linear,
}

impl AirNet {
    pub fn new(cfg: &AirConfig, frame_hw: [usize; 2], p: ParamPath) -> Result<Self> {
        cfg.validate()?;
        let nets = &cfg.nets;
        let [h, w] = frame_hw;
        let c = nets.cnt_channels;
        let k = nets.cnt_kernels;
        let cnt_convs = vec![
            Conv2d::new(1, c, k[0], Padding::uniform(nets.cnt_pad), p.pp("cnt.conv0"))?,
            Conv2d::new(c, c, k[1], Padding::default(), p.pp("cnt.conv1"))?,
            Conv2d::new(c, c, k[2], Padding::default(), p.pp("cnt.conv2"))?,
        ];
        let (mut ch, mut cw) = cnt_convs[0].out_hw(h, w);
        (ch, cw) = (ch / 2, cw / 2);
        (ch, cw) = cnt_convs[1].out_hw(ch, cw);
        (ch, cw) = (ch / 2, cw / 2);
        (ch, cw) = cnt_convs[2].out_hw(ch, cw);
        if ch == 0 || cw == 0 {
            return Err(Error::Config(format!("frame {h}x{w} too small for the count network")));
        }
        let cnt_in = c * ch * cw;
        let cnt_mlp = Mlp::new(cnt_in, &nets.cnt_dense, Activation::Relu, p.pp("cnt.mlp"))?;
        let cnt_head = GaussianHead::new(
            cnt_mlp.out_dim(cnt_in),
            0,
            1,
            Activation::Identity,
            Squash::None,
            p.pp("cnt.head"),
        )?;

        let pc = nets.pre_channels;
        let pk = nets.pre_kernel;
        let pre_convs = vec![
            Conv2d::new(1, pc, pk, Padding::same(pk, pk), p.pp("pre.conv0"))?,
            Conv2d::new(pc, pc, pk, Padding::same(pk, pk), p.pp("pre.conv1"))?,
        ];
        let (ph, pw) = (h / 4, w / 4);
        if ph == 0 || pw == 0 {
            return Err(Error::Config(format!("frame {h}x{w} too small for the pre-processing network")));
        }
        let pre_out = pc * ph * pw;
        let loc_lstm = Lstm::new(pre_out, nets.loc_hidden, p.pp("loc.lstm"))?;
        let size_head = GaussianHead::new(
            nets.loc_hidden,
            nets.loc_head,
            2,
            Activation::Relu,
            Squash::Sigmoid,
            p.pp("loc.size"),
        )?;
        let pos_head = GaussianHead::new(
            nets.loc_hidden,
            nets.loc_head,
            2,
            Activation::Relu,
            Squash::Tanh,
            p.pp("loc.position"),
        )?;
        let g2 = cfg.glimpse * cfg.glimpse;
        let encoder = Mlp::new(g2, &nets.encoder, Activation::Relu, p.pp("enc"))?;
        let desc_head = GaussianHead::new(
            encoder.out_dim(g2),
            0,
            cfg.desc_dim,
            Activation::Identity,
            Squash::None,
            p.pp("enc.head"),
        )?;
        let decoder = Mlp::new(cfg.desc_dim, &nets.decoder, Activation::Relu, p.pp("dec"))?;
        let dec_out = Linear::new(decoder.out_dim(cfg.desc_dim), g2, p.pp("dec.out"))?;
        Ok(Self {
            cfg: cfg.clone(),
            hw: frame_hw,
            cnt_convs,
            cnt_mlp,
            cnt_head,
            pre_convs,
            loc_lstm,
            size_head,
            pos_head,
            encoder,
            desc_head,
            decoder,
            dec_out,
        })
    }

    pub fn config(&self) -> &AirConfig {
        &self.cfg
    }

    pub fn frame_hw(&self) -> [usize; 2] {
        self.hw
    }

    fn count_posterior(&self, x: &Tensor) -> Result<Normal> {
        let mut h = self.cnt_convs[0].forward(x)?.relu()?;
        h = max_pool2(&h)?;
        h = self.cnt_convs[1].forward(&h)?.relu()?;
        h = max_pool2(&h)?;
        h = self.cnt_convs[2].forward(&h)?.relu()?;
        let h = self.cnt_mlp.forward(&h.flatten_from(1)?)?;
        self.cnt_head.forward(&h)
    }

    fn preprocess(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.pre_convs {
            h = max_pool2(&conv.forward(&h)?.relu()?)?;
        }
        Ok(h.flatten_from(1)?)
    }

    /// Description posterior from glimpses `[.., g, g]`.
    pub fn encode(&self, glimpses: &Tensor) -> Result<Normal> {
        let g = self.cfg.glimpse;
        let lead = &glimpses.dims()[..glimpses.rank() - 2];
        let mut flat = lead.to_vec();
        flat.push(g * g);
        let h = self.encoder.forward(&glimpses.reshape(flat)?)?;
        self.desc_head.forward(&h)
    }

    /// Decoded glimpses `[.., g, g]` in `[0, 1]` from description samples `[.., d]`.
    pub fn decode(&self, desc: &Tensor) -> Result<Tensor> {
        let g = self.cfg.glimpse;
        let h = self.decoder.forward(desc)?;
        let out = candle_nn::ops::sigmoid(&self.dec_out.forward(&h)?)?;
        let mut dims = desc.dims()[..desc.rank() - 1].to_vec();
        dims.extend([g, g]);
        Ok(out.reshape(dims)?)
    }

    /// Per-frame inference for frames `[B, H, W]`.
    pub fn infer(&self, frames: &Tensor, sampler: &mut Sampler, training: bool) -> Result<AirInference> {
        let (b, h, w) = frames.dims3()?;
        if [h, w] != self.hw {
            return Err(Error::invalid(format!(
                "frame {h}x{w} does not match the network's {}x{}",
                self.hw[0], self.hw[1]
            )));
        }
        let n = self.cfg.max_objects;
        let x = frames.unsqueeze(1)?;
        let cnt = self.count_posterior(&x)?;
        let cnt_s = sampler.draw(&cnt)?;

        let f = self.preprocess(&x)?;
        let fp = self.loc_lstm.project(&f)?;
        let mut state = self.loc_lstm.zero_state(b, frames.dtype(), frames.device())?;
        let mut outs = Vec::with_capacity(n);
        for _ in 0..n {
            state = self.loc_lstm.step_projected(&fp, &state)?;
            let o = if training {
                dropout(&state.h, self.cfg.loc_dropout, sampler)?
            } else {
                state.h.clone()
            };
            outs.push(o);
        }
        let hs = Tensor::stack(&outs, 1)?;
        let size = self.size_head.forward(&hs)?;
        let position = self.pos_head.forward(&hs)?;
        let size_s = box_size(&sampler.draw(&size)?)?;
        let pos_s = sampler.draw(&position)?;

        let g = self.cfg.glimpse;
        let rep = frames.unsqueeze(1)?.broadcast_as((b, n, h, w))?.reshape((b * n, h, w))?;
        let glimpses = geometry::extract(&rep, &size_s.reshape((b * n, 2))?, &pos_s.reshape((b * n, 2))?, g)?
            .reshape((b, n, g, g))?;
        let desc = self.encode(&glimpses)?;
        let desc_s = sampler.draw(&desc)?;
        Ok(AirInference {
            latents: AirLatents {
                cnt,
                size,
                position,
                desc,
            },
            samples: AirSamples {
                cnt: cnt_s,
                size: size_s,
                position: pos_s,
                desc: desc_s,
            },
            glimpses,
        })
    }

    /// Centering mask at mask-flattening parameter `p`, or `None` outside training.
    pub fn mask(&self, p: f64, training: bool, dtype: DType) -> Result<Option<Tensor>> {
        if !training {
            return Ok(None);
        }
        let k = regularization_kernel(self.cfg.glimpse, self.cfg.sigma_k, p)?;
        Ok(Some(k.to_tensor(dtype, &Device::Cpu)?))
    }

    /// Mean canvases `[B, H, W]` generated from per-slot samples.
    pub fn generate(&self, samples: &AirSamples, mask: Option<&Tensor>) -> Result<Tensor> {
        let n = self.cfg.max_objects;
        let (b, _, _) = samples.size.dims3()?;
        let [h, w] = self.hw;
        let n_tilde = n_tilde_tensor(&samples.cnt, n)?;
        let steps = split_tensor(&n_tilde, n)?;
        let g = self.cfg.glimpse;
        let glimpses = self.decode(&samples.desc)?.reshape((b * n, g, g))?;
        let canvases = render_objects(
            &glimpses,
            &steps.reshape(b * n)?,
            &samples.size.reshape((b * n, 2))?,
            &samples.position.reshape((b * n, 2))?,
            mask,
            h,
            w,
        )?;
        Ok(canvases.reshape((b, n, h, w))?.sum(1)?)
    }

    /// Single-frame ELBO for frames `[B, H, W]` and their inference.
    pub fn elbo(&self, frames: &Tensor, inf: &AirInference, cnt_prior_loc: f64, mask: Option<&Tensor>) -> Result<AirElbo> {
        let mean = self.generate(&inf.samples, mask)?;
        self.elbo_with_mean(frames, inf, cnt_prior_loc, &mean)
    }

    /// As [`AirNet::elbo`], with the likelihood mean `[B, H, W]` already rendered.
    pub fn elbo_with_mean(&self, frames: &Tensor, inf: &AirInference, cnt_prior_loc: f64, mean: &Tensor) -> Result<AirElbo> {
        let cfg = &self.cfg;
        let n = cfg.max_objects;
        let (b, _, _) = frames.dims3()?;
        let (dt, dev) = (frames.dtype(), frames.device());
        let recon = pixel_log_lik(frames, mean, cfg.sigma_l)?;
        let n_ceil = ceil_counts(&n_tilde_tensor(&inf.samples.cnt, n)?, n)?;
        let active = active_mask(&n_ceil, n, dt, dev)?;
        let lat = &inf.latents;
        let kl_cnt = lat
            .cnt
            .kl(&Normal::constant(&[cnt_prior_loc], cfg.cnt_prior.scale, &[b], dt, dev)?)?;
        let kl_size = (lat
            .size
            .kl(&Normal::constant(&cfg.size_prior_loc, cfg.size_prior_scale, &[b, n], dt, dev)?)?
            * &active)?
            .sum(1)?;
        let kl_position = (lat.position.kl(&Normal::standard(&[b, n, 2], dt, dev)?)? * &active)?.sum(1)?;
        let kl_desc = (lat.desc.kl(&Normal::standard(&[b, n, cfg.desc_dim], dt, dev)?)? * &active)?.sum(1)?;
        let kl = (((&kl_cnt + &kl_size)? + &kl_position)? + &kl_desc)?;
        Ok(AirElbo {
            elbo: (&recon - kl)?,
            recon,
            kl_cnt,
            kl_size,
            kl_position,
            kl_desc,
            n_ceil,
        })
    }
}

/// Pastes `glimpses [M, g, g]`, scaled by `steps [M]` and the optional mask
/// `[g, g]`, into `[M, H, W]` canvases.
pub fn render_objects(
    glimpses: &Tensor,
    steps: &Tensor,
    size: &Tensor,
    position: &Tensor,
    mask: Option<&Tensor>,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let mut q = glimpses.clone();
    if let Some(m) = mask {
        q = q.broadcast_mul(m)?;
    }
    q = q.broadcast_mul(&steps.reshape((steps.elem_count(), 1, 1))?)?;
    geometry::paste(&q, size, position, h, w)
}

/// Gaussian log-likelihood of `frames` under per-pixel `N(mean, sigma)`,
/// summed over all axes but the first.
pub fn pixel_log_lik(frames: &Tensor, mean: &Tensor, sigma: f64) -> Result<Tensor> {
    let b = frames.dim(0)?;
    let per = frames.elem_count() / b.max(1);
    let z = ((frames - mean)? / sigma)?;
    let c = -0.5 * (2.0 * std::f64::consts::PI).ln() - sigma.ln();
    let s = (z.sqr()?.reshape((b, per))?.sum(D::Minus1)? * -0.5)?;
    Ok((s + c * per as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn tiny_cfg() -> AirConfig {
        AirConfig {
            glimpse: 6,
            desc_dim: 4,
            nets: AirNets {
                cnt_channels: 4,
                cnt_dense: vec![16, 8],
                pre_channels: 4,
                loc_hidden: 16,
                loc_head: 8,
                encoder: vec![16, 8],
                decoder: vec![8, 16],
                ..AirNets::default()
            },
            ..AirConfig::default()
        }
    }

    #[test]
    fn split_examples() {
        let s = split_count(0.7, 2).unwrap();
        assert!((s[0] - 0.7).abs() < 1e-15 && s[1] == 0.0);
        let e = 1e-7;
        let s = split_count(1.0 + e, 2).unwrap();
        assert_eq!(s[0], 1.0);
        assert!((s[1] - e).abs() < 1e-15);
        assert!(split_count(0.0, 2).is_err());
        assert!(split_count(2.0, 2).is_err());
        assert_eq!(split_count(1.0, 3).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn count_examples() {
        assert_eq!(count_from_latent(0.0, 2), (1.0, 1));
        let (nt, c) = count_from_latent(-50.0, 2);
        assert!(nt < 1e-20 && c == 1);
        let (nt, c) = count_from_latent(2.1972, 2);
        assert!((nt - 1.8).abs() < 1e-4 && c == 2);
        assert_eq!(rounded_count(1.49, 2), 1);
        assert_eq!(rounded_count(1.51, 2), 2);
    }

    #[test]
    fn inference_shapes_and_finiteness() -> Result<()> {
        let cfg = tiny_cfg();
        let store = ParamStore::new(DType::F64, 1);
        let net = AirNet::new(&cfg, [16, 16], store.root())?;
        let frames = Tensor::zeros((3, 16, 16), DType::F64, &Device::Cpu)?;
        let inf = net.infer(&frames, &mut Sampler::seeded(0), true)?;
        assert_eq!(inf.latents.cnt.loc.dims(), &[3, 1]);
        assert_eq!(inf.latents.size.loc.dims(), &[3, 2, 2]);
        assert_eq!(inf.latents.desc.loc.dims(), &[3, 2, 4]);
        for t in [&inf.latents.size.scale, &inf.latents.position.scale, &inf.latents.desc.scale] {
            let v = t.flatten_all()?.to_vec1::<f64>()?;
            assert!(v.iter().all(|s| s.is_finite() && *s > 0.0));
        }
        let e = net.elbo(&frames, &inf, -2.0, net.mask(0.0, true, DType::F64)?.as_ref())?;
        assert!(e.elbo.to_vec1::<f64>()?.iter().all(|v| v.is_finite()));
        Ok(())
    }

    #[test]
    fn mask_is_ignored_at_test_time() -> Result<()> {
        let store = ParamStore::new(DType::F64, 2);
        let net = AirNet::new(&tiny_cfg(), [16, 16], store.root())?;
        assert!(net.mask(0.0, false, DType::F64)?.is_none());
        Ok(())
    }
}
