//! Diagonal-Gaussian algebra.
//!
//! Two representations live here. [`DiagGaussian`] is a plain `f64` value type
//! used for reporting, tests and anything that does not need gradients.
//! [`Normal`] is the batched tensor form used inside the model, where the last
//! axis is the event dimension and every leading axis is a batch axis. Both
//! implement the same closed-form operations.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Tolerance on `|sum(w) - 1|` accepted by [`fuse_weighted`].
pub const WEIGHT_SUM_TOL: f64 = 1e-6;

/// Diagonal Gaussian with strictly positive scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    loc: Vec<f64>,
    scale: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(loc: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        check_dim(loc.len(), scale.len())?;
        if let Some(s) = scale.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("scale must be positive, got {s}")));
        }
        if loc.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("loc must be finite"));
        }
        Ok(Self { loc, scale })
    }

    /// Same scale on every axis.
    pub fn isotropic(loc: Vec<f64>, scale: f64) -> Result<Self> {
        let scale = vec![scale; loc.len()];
        Self::new(loc, scale)
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            loc: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.loc.len()
    }

    pub fn loc(&self) -> &[f64] {
        &self.loc
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// `loc + scale * noise`.
    pub fn sample_reparam(&self, noise: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), noise.len())?;
        Ok(self
            .loc
            .iter()
            .zip(&self.scale)
            .zip(noise)
            .map(|((m, s), e)| m + s * e)
            .collect())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let noise: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_reparam(&noise).expect("noise has matching dimension")
    }

    /// Closed-form `KL(self || prior)`, summed over dimensions.
    pub fn kl_divergence(&self, prior: &DiagGaussian) -> Result<f64> {
        check_dim(self.dim(), prior.dim())?;
        let mut kl = 0.0;
        for i in 0..self.dim() {
            let (mq, sq) = (self.loc[i], self.scale[i]);
            let (mp, sp) = (prior.loc[i], prior.scale[i]);
            let r = sq / sp;
            let d = (mq - mp) / sp;
            kl += 0.5 * (r * r + d * d - 1.0) - r.ln();
        }
        Ok(kl.max(0.0))
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self
            .loc
            .iter()
            .zip(&self.scale)
            .zip(x)
            .map(|((m, s), x)| {
                let z = (x - m) / s;
                -0.5 * z * z - s.ln() - HALF_LN_2PI
            })
            .sum())
    }

    pub fn mode(&self) -> &[f64] {
        &self.loc
    }
}

/// Weighted average of independent Gaussians: means weighted by `w`, variances by `w²`.
pub fn fuse_weighted(vars: &[DiagGaussian], weights: &[f64]) -> Result<DiagGaussian> {
    let first = vars
        .first()
        .ok_or_else(|| Error::invalid("fuse_weighted needs at least one input"))?;
    check_dim(vars.len(), weights.len())?;
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::invalid("weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::invalid(format!("weights sum to {total}, not 1")));
    }
    let d = first.dim();
    for v in vars {
        check_dim(d, v.dim())?;
    }
    // One-hot weights select the input exactly.
    if let Some(k) = weights.iter().position(|w| *w == 1.0) {
        if weights.iter().enumerate().all(|(j, w)| j == k || *w == 0.0) {
            return Ok(vars[k].clone());
        }
    }
    let mut loc = vec![0.0; d];
    let mut var = vec![0.0; d];
    for (g, &w) in vars.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for i in 0..d {
            loc[i] += w * g.loc[i];
            var[i] += w * w * g.scale[i] * g.scale[i];
        }
    }
    DiagGaussian::new(loc, var.into_iter().map(f64::sqrt).collect())
}

/// Source of reparameterization noise.
///
/// `Mode` replaces every draw by the distribution mode, which is how the
/// evaluation path runs deterministically.
#[derive(Debug, Clone)]
pub enum Sampler {
    Random(ChaCha8Rng),
    Mode,
}

impl Sampler {
    pub fn seeded(seed: u64) -> Self {
        use rand::SeedableRng;
        Sampler::Random(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn is_mode(&self) -> bool {
        matches!(self, Sampler::Mode)
    }

    pub fn draw(&mut self, dist: &Normal) -> Result<Tensor> {
        match self {
            Sampler::Mode => Ok(dist.loc.clone()),
            Sampler::Random(rng) => {
                let noise = standard_normal_like(rng, &dist.loc)?;
                dist.sample(&noise)
            }
        }
    }

    /// Uniform draw in `[lo, hi]`; the midpoint in mode mode.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        match self {
            Sampler::Mode => 0.5 * (lo + hi),
            Sampler::Random(rng) => {
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            }
        }
    }

    /// Independent Bernoulli keep-mask with keep probability `keep`, as a tensor shaped like `like`.
    pub fn bernoulli_like(&mut self, keep: f64, like: &Tensor) -> Result<Tensor> {
        let n = like.elem_count();
        let data: Vec<f64> = match self {
            Sampler::Mode => vec![1.0; n],
            Sampler::Random(rng) => (0..n)
                .map(|_| if rng.random::<f64>() < keep { 1.0 } else { 0.0 })
                .collect(),
        };
        Ok(Tensor::from_vec(data, like.shape(), like.device())?.to_dtype(like.dtype())?)
    }
}

pub(crate) fn standard_normal_like(rng: &mut ChaCha8Rng, like: &Tensor) -> Result<Tensor> {
    let n = like.elem_count();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, like.shape(), like.device())?.to_dtype(like.dtype())?)
}

/// Batched diagonal Gaussian over tensors; the last axis is the event axis.
#[derive(Clone, Debug)]
pub struct Normal {
    pub loc: Tensor,
    pub scale: Tensor,
}

impl Normal {
    pub fn new(loc: Tensor, scale: Tensor) -> Result<Self> {
        if loc.dims() != scale.dims() {
            return Err(Error::invalid(format!(
                "loc shape {:?} differs from scale shape {:?}",
                loc.dims(),
                scale.dims()
            )));
        }
        Ok(Self { loc, scale })
    }

    /// Gaussian with the given loc and a constant scale everywhere.
    pub fn with_fixed_scale(loc: Tensor, scale: f64) -> Result<Self> {
        let scale = loc.ones_like()?.affine(scale, 0.0)?;
        Self::new(loc, scale)
    }

    /// Constant-parameter Gaussian broadcast to `shape`.
    pub fn constant(loc: &[f64], scale: f64, batch: &[usize], dtype: DType, dev: &Device) -> Result<Self> {
        let d = loc.len();
        let mut dims = batch.to_vec();
        dims.push(d);
        let loc = Tensor::from_slice(loc, d, dev)?
            .to_dtype(dtype)?
            .broadcast_as(dims.as_slice())?
            .contiguous()?;
        Self::with_fixed_scale(loc, scale)
    }

    pub fn standard(dims: &[usize], dtype: DType, dev: &Device) -> Result<Self> {
        Self::new(
            Tensor::zeros(dims, dtype, dev)?,
            Tensor::ones(dims, dtype, dev)?,
        )
    }

    /// Gaussian head output: raw scale mapped smoothly onto positive reals.
    pub fn from_raw(loc: Tensor, raw_scale: &Tensor) -> Result<Self> {
        let scale = positive(raw_scale)?;
        Self::new(loc, scale)
    }

    pub fn dim(&self) -> usize {
        self.loc.dims().last().copied().unwrap_or(1)
    }

    pub fn sample(&self, noise: &Tensor) -> Result<Tensor> {
        if noise.dims() != self.loc.dims() {
            return Err(Error::invalid(format!(
                "noise shape {:?} differs from {:?}",
                noise.dims(),
                self.loc.dims()
            )));
        }
        Ok((&self.loc + (&self.scale * noise)?)?)
    }

    /// `KL(self || prior)` summed over the event axis.
    pub fn kl(&self, prior: &Normal) -> Result<Tensor> {
        let ratio = (&self.scale / &prior.scale)?;
        let diff = ((&self.loc - &prior.loc)? / &prior.scale)?;
        let per = (((ratio.sqr()? + diff.sqr()?)? - 1.0)? * 0.5)?;
        let per = (per - ratio.log()?)?;
        Ok(per.sum(D::Minus1)?)
    }

    pub fn log_prob(&self, x: &Tensor) -> Result<Tensor> {
        let z = ((x - &self.loc)? / &self.scale)?;
        let per = ((z.sqr()? * -0.5)? - self.scale.log()?)?;
        let per = (per - HALF_LN_2PI)?;
        Ok(per.sum(D::Minus1)?)
    }

    pub fn mode(&self) -> &Tensor {
        &self.loc
    }

    pub fn detach(&self) -> Normal {
        Normal {
            loc: self.loc.detach(),
            scale: self.scale.detach(),
        }
    }

    pub fn index_select(&self, ids: &Tensor, dim: usize) -> Result<Normal> {
        Ok(Normal {
            loc: self.loc.index_select(ids, dim)?,
            scale: self.scale.index_select(ids, dim)?,
        })
    }

    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Normal> {
        Ok(Normal {
            loc: self.loc.narrow(dim, start, len)?,
            scale: self.scale.narrow(dim, start, len)?,
        })
    }

    pub fn stack(parts: &[Normal], dim: usize) -> Result<Normal> {
        let locs: Vec<_> = parts.iter().map(|p| p.loc.clone()).collect();
        let scales: Vec<_> = parts.iter().map(|p| p.scale.clone()).collect();
        Ok(Normal {
            loc: Tensor::stack(&locs, dim)?,
            scale: Tensor::stack(&scales, dim)?,
        })
    }

    /// Concatenated `[loc, scale]` along the event axis.
    pub fn params(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.loc, &self.scale], D::Minus1)?)
    }

    /// Row `i` of a `[B, d]` Gaussian as a plain value.
    pub fn row(&self, i: usize) -> Result<DiagGaussian> {
        let loc = self.loc.get(i)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let scale = self.scale.get(i)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        DiagGaussian::new(loc, scale)
    }

    pub fn from_plain(g: &DiagGaussian, dtype: DType, dev: &Device) -> Result<Normal> {
        let d = g.dim();
        Normal::new(
            Tensor::from_slice(g.loc(), d, dev)?.to_dtype(dtype)?,
            Tensor::from_slice(g.scale(), d, dev)?.to_dtype(dtype)?,
        )
    }
}

/// Weighted fusion of batched Gaussians.
///
/// `weights[k]` broadcasts against the loc of `parts[k]` after a trailing
/// event axis is appended, so a `[B]` weight vector fuses row-wise.
pub fn fuse_tensors(parts: &[&Normal], weights: &[Tensor]) -> Result<Normal> {
    if parts.is_empty() {
        return Err(Error::invalid("fusion needs at least one input"));
    }
    check_dim(parts.len(), weights.len())?;
    let mut loc: Option<Tensor> = None;
    let mut var: Option<Tensor> = None;
    for (g, w) in parts.iter().zip(weights) {
        let w = w.unsqueeze(D::Minus1)?;
        let m = g.loc.broadcast_mul(&w)?;
        let v = g.scale.sqr()?.broadcast_mul(&w.sqr()?)?;
        loc = Some(match loc {
            None => m,
            Some(acc) => (acc + m)?,
        });
        var = Some(match var {
            None => v,
            Some(acc) => (acc + v)?,
        });
    }
    let scale = var.expect("non-empty").sqrt()?;
    Normal::new(loc.expect("non-empty"), scale)
}

/// Smooth map onto positive reals used for every scale output.
pub fn positive(raw: &Tensor) -> Result<Tensor> {
    // softplus(x) = max(x, 0) + ln(1 + e^{-|x|}), plus a floor.
    let sp = (raw.relu()? + ((raw.abs()?.neg()?.exp()? + 1.0)?.log()?))?;
    Ok((sp + 1e-4)?)
}
