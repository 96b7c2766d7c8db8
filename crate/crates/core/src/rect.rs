//! Consensus over per-frame scene latents from the first `K` frames.
//!
//! A bidirectional recurrence reads the distribution parameters of every
//! frame's latents and emits one softmax weight per frame; the latents are
//! then fused slot by slot as distributions (never as samples).

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::air::AirLatents;
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Lstm, Mlp, ParamPath};
use crate::prob::Normal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RectConfig {
    pub hidden: usize,
    pub dense: Vec<usize>,
}

impl Default for RectConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            dense: vec![64, 64],
        }
    }
}

/// How the per-frame weights are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RectMode {
    #[default]
    Soft,
    /// Picks the highest-weighted frame outright.
    OneHot,
}

/// Rectified latents of a batch of sequences.
#[derive(Debug, Clone)]
pub struct Rectified {
    /// `[B, 1]`
    pub cnt: Normal,
    /// `[B, N, 2]`
    pub size: Normal,
    /// `[B, N, d]`
    pub desc: Normal,
    /// `[B, K]`, rows sum to one.
    pub weights: Tensor,
}

#[derive(Debug, Clone)]
pub struct RectNet {
    fwd: Lstm,
    bwd: Lstm,
    mlp: Mlp,
    out: Linear,
    input: usize,
}

/// Width of one frame's concatenated latent parameters.
pub fn rect_input_dim(n: usize, desc_dim: usize) -> usize {
    2 * (1 + 2 * n + desc_dim * n)
}

fn frame_params(l: &AirLatents) -> Result<Tensor> {
    let b = l.cnt.loc.dim(0)?;
    Ok(Tensor::cat(
        &[
            l.cnt.params()?,
            l.size.params()?.reshape((b, ()))?,
            l.desc.params()?.reshape((b, ()))?,
        ],
        D::Minus1,
    )?)
}

/// `sum_k w_k * x_k` with `w [B, K]` broadcast over the trailing axes of each `x_k`.
fn weighted_sum(parts: &[Tensor], w: &Tensor) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for (k, x) in parts.iter().enumerate() {
        let mut shape = vec![x.dim(0)?];
        shape.extend(std::iter::repeat_n(1, x.rank() - 1));
        let wk = w.narrow(1, k, 1)?.reshape(shape)?;
        let term = x.broadcast_mul(&wk)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    acc.ok_or_else(|| Error::invalid("no frames to rectify"))
}

/// Slot-wise fusion: locs weighted by `w`, variances by `w^2`.
pub fn fuse_frames(parts: &[&Normal], w: &Tensor) -> Result<Normal> {
    let locs: Vec<Tensor> = parts.iter().map(|p| p.loc.clone()).collect();
    let vars: Vec<Tensor> = parts.iter().map(|p| p.scale.sqr()).collect::<candle_core::Result<_>>()?;
    Normal::new(weighted_sum(&locs, w)?, weighted_sum(&vars, &w.sqr()?)?.sqrt()?)
}

/// Exact per-row selection of the frame marked in a one-hot `w`.
fn select_frames(parts: &[&Normal], w: &Tensor) -> Result<Normal> {
    let locs: Vec<Tensor> = parts.iter().map(|p| p.loc.clone()).collect();
    let scales: Vec<Tensor> = parts.iter().map(|p| p.scale.clone()).collect();
    Normal::new(weighted_sum(&locs, w)?, weighted_sum(&scales, w)?)
}

fn one_hot_argmax(w: &Tensor) -> Result<Tensor> {
    let (b, k) = w.dims2()?;
    let idx = w.argmax_keepdim(1)?.flatten_all()?.to_vec1::<u32>()?;
    let mut v = vec![0f64; b * k];
    for (i, j) in idx.into_iter().enumerate() {
        v[i * k + j as usize] = 1.0;
    }
    Ok(Tensor::from_vec(v, (b, k), w.device())?.to_dtype(w.dtype())?)
}

impl RectNet {
    pub fn new(cfg: &RectConfig, n: usize, desc_dim: usize, p: ParamPath) -> Result<Self> {
        let input = rect_input_dim(n, desc_dim);
        let mlp = Mlp::new(2 * cfg.hidden, &cfg.dense, Activation::Relu, p.pp("mlp"))?;
        Ok(Self {
            fwd: Lstm::new(input, cfg.hidden, p.pp("fwd"))?,
            bwd: Lstm::new(input, cfg.hidden, p.pp("bwd"))?,
            out: Linear::new(mlp.out_dim(2 * cfg.hidden), 1, p.pp("out"))?,
            mlp,
            input,
        })
    }

    /// Softmax weights `[B, K]` for the per-frame latents.
    pub fn weights(&self, frames: &[AirLatents]) -> Result<Tensor> {
        let params: Vec<Tensor> = frames.iter().map(frame_params).collect::<Result<_>>()?;
        let x = Tensor::stack(&params, 1)?;
        if x.dim(2)? != self.input {
            return Err(Error::DimensionMismatch {
                expected: self.input,
                got: x.dim(2)?,
            });
        }
        let h = Tensor::cat(&[self.fwd.run(&x, false)?, self.bwd.run(&x, true)?], D::Minus1)?;
        let logits = self.out.forward(&self.mlp.forward(&h)?)?.squeeze(D::Minus1)?;
        Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
    }

    pub fn rectify(&self, frames: &[AirLatents], mode: RectMode) -> Result<Rectified> {
        if frames.is_empty() {
            return Err(Error::invalid("rectification needs at least one frame"));
        }
        if frames.len() == 1 {
            let f = &frames[0];
            let b = f.cnt.loc.dim(0)?;
            return Ok(Rectified {
                cnt: f.cnt.clone(),
                size: f.size.clone(),
                desc: f.desc.clone(),
                weights: Tensor::ones((b, 1), f.cnt.loc.dtype(), f.cnt.loc.device())?,
            });
        }
        let w = self.weights(frames)?;
        let cnts: Vec<&Normal> = frames.iter().map(|f| &f.cnt).collect();
        let sizes: Vec<&Normal> = frames.iter().map(|f| &f.size).collect();
        let descs: Vec<&Normal> = frames.iter().map(|f| &f.desc).collect();
        match mode {
            RectMode::Soft => Ok(Rectified {
                cnt: fuse_frames(&cnts, &w)?,
                size: fuse_frames(&sizes, &w)?,
                desc: fuse_frames(&descs, &w)?,
                weights: w,
            }),
            RectMode::OneHot => {
                let w = one_hot_argmax(&w)?;
                Ok(Rectified {
                    cnt: select_frames(&cnts, &w)?,
                    size: select_frames(&sizes, &w)?,
                    desc: select_frames(&descs, &w)?,
                    weights: w,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn latents(b: usize, seed: f64) -> Result<AirLatents> {
        let dev = Device::Cpu;
        let t = |dims: &[usize], off: f64| -> Result<Tensor> {
            let n: usize = dims.iter().product();
            let v: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * (seed + off)).sin()).collect();
            Ok(Tensor::from_vec(v, dims, &dev)?)
        };
        let pos = |x: Tensor| -> Result<Tensor> { Ok((x.abs()? + 0.1)?) };
        Ok(AirLatents {
            cnt: Normal::new(t(&[b, 1], 0.1)?, pos(t(&[b, 1], 0.2)?)?)?,
            size: Normal::new(t(&[b, 2, 2], 0.3)?, pos(t(&[b, 2, 2], 0.4)?)?)?,
            position: Normal::new(t(&[b, 2, 2], 0.5)?, pos(t(&[b, 2, 2], 0.6)?)?)?,
            desc: Normal::new(t(&[b, 2, 3], 0.7)?, pos(t(&[b, 2, 3], 0.8)?)?)?,
        })
    }

    fn net() -> Result<(ParamStore, RectNet)> {
        let store = ParamStore::new(DType::F64, 9);
        let cfg = RectConfig {
            hidden: 8,
            dense: vec![6, 6],
        };
        let net = RectNet::new(&cfg, 2, 3, store.root())?;
        Ok((store, net))
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn single_frame_passes_through() -> Result<()> {
        let (_s, net) = net()?;
        let l = latents(2, 1.0)?;
        let r = net.rectify(std::slice::from_ref(&l), RectMode::Soft)?;
        assert_eq!(vals(&r.desc.loc), vals(&l.desc.loc));
        assert_eq!(vals(&r.cnt.scale), vals(&l.cnt.scale));
        assert_eq!(vals(&r.weights), vec![1.0, 1.0]);
        Ok(())
    }

    #[test]
    fn weights_are_normalized() -> Result<()> {
        let (_s, net) = net()?;
        let frames: Vec<_> = (0..4).map(|k| latents(3, k as f64 + 0.5)).collect::<Result<_>>()?;
        let w = net.weights(&frames)?;
        for row in w.to_vec2::<f64>()? {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|x| *x >= 0.0));
        }
        Ok(())
    }

    #[test]
    fn one_hot_selects_a_frame_exactly() -> Result<()> {
        let (_s, net) = net()?;
        let frames: Vec<_> = (0..3).map(|k| latents(2, k as f64 + 0.5)).collect::<Result<_>>()?;
        let r = net.rectify(&frames, RectMode::OneHot)?;
        let w = r.weights.to_vec2::<f64>()?;
        for (b, row) in w.iter().enumerate() {
            let k = row.iter().position(|x| *x == 1.0).unwrap();
            assert_eq!(vals(&r.size.loc.get(b)?), vals(&frames[k].size.loc.get(b)?));
            assert_eq!(vals(&r.desc.scale.get(b)?), vals(&frames[k].desc.scale.get(b)?));
        }
        Ok(())
    }

    #[test]
    fn equal_weights_on_identical_frames() -> Result<()> {
        let l = latents(1, 2.0)?;
        let parts = [&l.desc, &l.desc, &l.desc, &l.desc];
        let w = Tensor::full(0.25f64, (1, 4), &Device::Cpu)?;
        let f = fuse_frames(&parts, &w)?;
        for (a, b) in vals(&f.loc).iter().zip(vals(&l.desc.loc)) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in vals(&f.scale).iter().zip(vals(&l.desc.scale)) {
            assert!((a - b / 2.0).abs() < 1e-12);
        }
        Ok(())
    }
}
