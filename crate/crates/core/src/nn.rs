//! Small neural-network toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] with deterministic, seeded
//! initialization (candle's CPU generator cannot be seeded). Convolution is
//! lowered to an explicit im2col followed by one large matmul.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::prob::{Normal, Sampler};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

/// Named, seeded parameter registry.
pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    rng: Mutex<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.num_params())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamPath<'_> {
        ParamPath {
            store: self,
            prefix: String::new(),
        }
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut vars = self.vars.lock().expect("param store poisoned");
        if vars.contains_key(&name) {
            return Err(Error::invalid(format!("parameter {name} registered twice")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = {
            let mut rng = self.rng.lock().expect("param rng poisoned");
            match init {
                Init::Zeros => vec![0.0; n],
                Init::Const(c) => vec![c; n],
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
                Init::Normal(s) => (0..n)
                    .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(name, var);
        Ok(out)
    }

    /// All variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let vars = self.vars.lock().expect("param store poisoned");
        vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn num_params(&self) -> usize {
        let vars = self.vars.lock().expect("param store poisoned");
        vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite the value of an existing parameter.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let vars = self.vars.lock().expect("param store poisoned");
        let var = vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

#[derive(Clone)]
pub struct ParamPath<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamPath<'a> {
    pub fn pp(&self, name: &str) -> ParamPath<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamPath {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.create(self.pp(name).prefix, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Tanh => x.tanh()?,
            Activation::Identity => x.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(input: usize, output: usize, p: ParamPath) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Self {
            weight: p.get("weight", &[output, input], Init::Uniform(bound))?,
            bias: p.get("bias", &[output], Init::Zeros)?,
        })
    }

    pub fn with_init(input: usize, output: usize, w: Init, b: Init, p: ParamPath) -> Result<Self> {
        Ok(Self {
            weight: p.get("weight", &[output, input], w)?,
            bias: p.get("bias", &[output], b)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Dense stack with one activation after every layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    act: Activation,
}

impl Mlp {
    pub fn new(input: usize, widths: &[usize], act: Activation, p: ParamPath) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(prev, w, p.pp(&format!("l{i}")))?);
            prev = w;
        }
        Ok(Self { layers, act })
    }

    pub fn out_dim(&self, input: usize) -> usize {
        self.layers
            .last()
            .map(|l| l.bias.dims()[0])
            .unwrap_or(input)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = self.act.apply(&l.forward(&h)?)?;
        }
        Ok(h)
    }
}

/// How the location output of a Gaussian head is squashed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Squash {
    None,
    Sigmoid,
    Tanh,
}

/// Two separate branches (hidden layer + linear output) for loc and scale.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    loc_hidden: Option<Linear>,
    loc_out: Linear,
    scale_hidden: Option<Linear>,
    scale_out: Linear,
    act: Activation,
    squash: Squash,
}

impl GaussianHead {
    /// `hidden = 0` gives a plain linear map to `[loc, raw scale]`.
    pub fn new(
        input: usize,
        hidden: usize,
        dim: usize,
        act: Activation,
        squash: Squash,
        p: ParamPath,
    ) -> Result<Self> {
        let (loc_hidden, scale_hidden, inner) = if hidden > 0 {
            (
                Some(Linear::new(input, hidden, p.pp("loc_hidden"))?),
                Some(Linear::new(input, hidden, p.pp("scale_hidden"))?),
                hidden,
            )
        } else {
            (None, None, input)
        };
        Ok(Self {
            loc_hidden,
            loc_out: Linear::new(inner, dim, p.pp("loc"))?,
            scale_hidden,
            // Start with moderate scales (softplus(-1) ~ 0.31).
            scale_out: Linear::with_init(
                inner,
                dim,
                Init::Uniform(0.1 / (inner as f64).sqrt()),
                Init::Const(-1.0),
                p.pp("scale"),
            )?,
            act,
            squash,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Normal> {
        let hl = match &self.loc_hidden {
            Some(l) => self.act.apply(&l.forward(x)?)?,
            None => x.clone(),
        };
        let hs = match &self.scale_hidden {
            Some(l) => self.act.apply(&l.forward(x)?)?,
            None => x.clone(),
        };
        let loc = self.loc_out.forward(&hl)?;
        let loc = match self.squash {
            Squash::None => loc,
            Squash::Sigmoid => candle_nn::ops::sigmoid(&loc)?,
            Squash::Tanh => loc.tanh()?,
        };
        Normal::from_raw(loc, &self.scale_out.forward(&hs)?)
    }
}

/// Zero padding on each side of a 2-D input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Output size equals input size for stride 1 (extra pixel goes after).
    pub fn same(kh: usize, kw: usize) -> Self {
        Self {
            top: (kh - 1) / 2,
            bottom: kh / 2,
            left: (kw - 1) / 2,
            right: kw / 2,
        }
    }
}

/// Patch extraction `[B, C, H, W] -> [B, oh*ow, C*kh*kw]`, stride 1.
#[derive(Debug, Clone, Copy)]
pub struct Im2Col {
    pub kh: usize,
    pub kw: usize,
    pub pad: Padding,
}

impl Im2Col {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + self.pad.top + self.pad.bottom + 1).saturating_sub(self.kh),
            (w + self.pad.left + self.pad.right + 1).saturating_sub(self.kw),
        )
    }

    fn fwd<T: Copy + Default>(&self, src: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = self.out_hw(h, w);
        let k = c * self.kh * self.kw;
        let mut dst = vec![T::default(); b * oh * ow * k];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * k;
                    for ci in 0..c {
                        let plane = (bi * c + ci) * h * w;
                        for ky in 0..self.kh {
                            let iy = (oy + ky) as isize - self.pad.top as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = row + (ci * self.kh + ky) * self.kw;
                            let src_row = plane + iy as usize * w;
                            for kx in 0..self.kw {
                                let ix = (ox + kx) as isize - self.pad.left as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[base + kx] = src[src_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        dst
    }

    fn bwd<T: Copy + Default + std::ops::AddAssign>(
        &self,
        grad: &[T],
        b: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> Vec<T> {
        let (oh, ow) = self.out_hw(h, w);
        let k = c * self.kh * self.kw;
        let mut dst = vec![T::default(); b * c * h * w];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * k;
                    for ci in 0..c {
                        let plane = (bi * c + ci) * h * w;
                        for ky in 0..self.kh {
                            let iy = (oy + ky) as isize - self.pad.top as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = row + (ci * self.kh + ky) * self.kw;
                            let dst_row = plane + iy as usize * w;
                            for kx in 0..self.kw {
                                let ix = (ox + kx) as isize - self.pad.left as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[dst_row + ix as usize] += grad[base + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        dst
    }
}

fn dims4(layout: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    layout.shape().dims4()
}

fn contiguous_slice<'a, T: candle_core::WithDType>(
    storage: &'a CpuStorage,
    layout: &Layout,
) -> candle_core::Result<&'a [T]> {
    let slice = storage.as_slice::<T>()?;
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&slice[a..b]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(layout)?;
        let (oh, ow) = self.out_hw(h, w);
        let shape = Shape::from((b, oh * ow, c * self.kh * self.kw));
        let out = match storage {
            CpuStorage::F32(_) => {
                CpuStorage::F32(self.fwd(contiguous_slice::<f32>(storage, layout)?, b, c, h, w))
            }
            CpuStorage::F64(_) => {
                CpuStorage::F64(self.fwd(contiguous_slice::<f64>(storage, layout)?, b, c, h, w))
            }
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        let grad = grad_res.contiguous()?;
        let col2im = Col2Im {
            op: *self,
            dims: (b, c, h, w),
        };
        Ok(Some(grad.apply_op1_no_bwd(&col2im)?))
    }
}

/// Adjoint of [`Im2Col`] (scatter-add of patches back to the image).
#[derive(Debug, Clone, Copy)]
struct Col2Im {
    op: Im2Col,
    dims: (usize, usize, usize, usize),
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = self.dims;
        let out = match storage {
            CpuStorage::F32(_) => {
                CpuStorage::F32(self.op.bwd(contiguous_slice::<f32>(storage, layout)?, b, c, h, w))
            }
            CpuStorage::F64(_) => {
                CpuStorage::F64(self.op.bwd(contiguous_slice::<f64>(storage, layout)?, b, c, h, w))
            }
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b, c, h, w))))
    }
}

pub fn im2col(x: &Tensor, kh: usize, kw: usize, pad: Padding) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Im2Col { kh, kw, pad })?)
}

/// Stride-1 convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    out_channels: usize,
    cols: Im2Col,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        pad: Padding,
        p: ParamPath,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let bound = (1.0 / fan_in as f64).sqrt() * 3f64.sqrt();
        Ok(Self {
            weight: p.get("weight", &[out_channels, fan_in], Init::Uniform(bound))?,
            bias: p.get("bias", &[out_channels], Init::Zeros)?,
            out_channels,
            cols: Im2Col {
                kh: kernel,
                kw: kernel,
                pad,
            },
        })
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        self.cols.out_hw(h, w)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _c, h, w) = x.dims4()?;
        let (oh, ow) = self.out_hw(h, w);
        let cols = x.contiguous()?.apply_op1(self.cols)?;
        let k = cols.dim(2)?;
        let out = cols
            .reshape((b * oh * ow, k))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        Ok(out
            .reshape((b, oh * ow, self.out_channels))?
            .transpose(1, 2)?
            .reshape((b, self.out_channels, oh, ow))?)
    }
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    Ok(x.max_pool2d(2)?)
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

#[derive(Debug, Clone)]
pub struct Lstm {
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
    hidden: usize,
}

impl Lstm {
    pub fn new(input: usize, hidden: usize, p: ParamPath) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let lstm = Self {
            w_ih: p.get("w_ih", &[4 * hidden, input], Init::Uniform(bound))?,
            w_hh: p.get("w_hh", &[4 * hidden, hidden], Init::Uniform(bound))?,
            bias: p.get("bias", &[4 * hidden], Init::Zeros)?,
            hidden,
        };
        Ok(lstm)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state(&self, batch: usize, dtype: DType, dev: &Device) -> Result<LstmState> {
        let z = Tensor::zeros((batch, self.hidden), dtype, dev)?;
        Ok(LstmState { h: z.clone(), c: z })
    }

    /// Input projection for a whole sequence at once (`[B, T, in] -> [B, T, 4h]`).
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.w_ih.t()?)?.broadcast_add(&self.bias)?)
    }

    /// One step given an already projected input `[B, 4h]`.
    pub fn step_projected(&self, xp: &Tensor, state: &LstmState) -> Result<LstmState> {
        let gates = (xp + state.h.matmul(&self.w_hh.t()?)?)?;
        let chunks = gates.chunk(4, D::Minus1)?;
        let i = candle_nn::ops::sigmoid(&chunks[0])?;
        // +1 forget bias.
        let f = candle_nn::ops::sigmoid(&(&chunks[1] + 1.0)?)?;
        let g = chunks[2].tanh()?;
        let o = candle_nn::ops::sigmoid(&chunks[3])?;
        let c = ((f * &state.c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok(LstmState { h, c })
    }

    pub fn step(&self, x: &Tensor, state: &LstmState) -> Result<LstmState> {
        self.step_projected(&self.project(x)?, state)
    }

    /// Runs over `[B, T, in]`, returning hidden states `[B, T, h]`.
    pub fn run(&self, x: &Tensor, reverse: bool) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let xp = self.project(x)?;
        let mut state = self.zero_state(b, x.dtype(), x.device())?;
        let mut out = vec![None; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for i in order {
            state = self.step_projected(&xp.narrow(1, i, 1)?.squeeze(1)?, &state)?;
            out[i] = Some(state.h.clone());
        }
        let hs: Vec<Tensor> = out.into_iter().map(|h| h.expect("every step visited")).collect();
        Ok(Tensor::stack(&hs, 1)?)
    }
}

/// Inverted dropout; identity when `rate == 0` or the sampler is in mode mode.
pub fn dropout(x: &Tensor, rate: f64, sampler: &mut Sampler) -> Result<Tensor> {
    if rate <= 0.0 || sampler.is_mode() {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let mask = sampler.bernoulli_like(keep, x)?;
    Ok(((x * mask)? / keep)?)
}

/// Scalar value of a single-element tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}
