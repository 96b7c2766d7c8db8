//! Differentiable axis-aligned spatial transformer and the centering mask.
//!
//! Coordinate conventions used throughout the crate:
//!
//! * Normalized coordinates run over `[-1, 1]` on each axis. `-1` is the
//!   center of the first pixel and `+1` the center of the last one, so a
//!   normalized coordinate `u` maps to the pixel coordinate
//!   `(u + 1) / 2 * (extent - 1)`.
//! * A box is `(size, position)`. `position` is the window center in
//!   normalized coordinates and `size` is the window extent as a fraction of
//!   the frame, so the window spans `position ± size` in normalized units.
//!   With `size = 1` and `position = 0` the window is the whole frame.
//! * Two-vectors are `(x, y)`: index 0 is the horizontal (column) axis and
//!   index 1 the vertical (row) axis. Images are stored row-major `[H, W]`.
//!
//! Bilinear sampling along one axis is the tent kernel `max(0, 1 - |u - j|)`,
//! so a separable warp is two small interpolation matrices and two matmuls.
//! Samples that fall outside the source read zero.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum box size fed to the transformer; sampled sizes are clamped to it.
pub const MIN_BOX_SIZE: f64 = 0.02;

/// Axis-aligned box in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxParams {
    pub size: [f64; 2],
    pub position: [f64; 2],
}

impl BoxParams {
    pub fn new(size: [f64; 2], position: [f64; 2]) -> Self {
        Self { size, position }
    }

    pub fn full_frame() -> Self {
        Self::new([1.0, 1.0], [0.0, 0.0])
    }

    fn tensors(&self, dtype: DType) -> Result<(Tensor, Tensor)> {
        let dev = Device::Cpu;
        Ok((
            Tensor::from_slice(&self.size, (1, 2), &dev)?.to_dtype(dtype)?,
            Tensor::from_slice(&self.position, (1, 2), &dev)?.to_dtype(dtype)?,
        ))
    }
}

/// `n` evenly spaced points covering `[-1, 1]`.
fn linspace(n: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let step = if n > 1 { 2.0 / (n - 1) as f64 } else { 0.0 };
    let v: Vec<f64> = (0..n).map(|i| -1.0 + step * i as f64).collect();
    Ok(Tensor::from_vec(v, n, dev)?.to_dtype(dtype)?)
}

/// Tent-kernel interpolation matrix: `coords [B, n]` (pixel units) -> `[B, n, extent]`.
fn interp_matrix(coords: &Tensor, extent: usize) -> Result<Tensor> {
    let idx = Tensor::arange(0u32, extent as u32, coords.device())?
        .to_dtype(coords.dtype())?
        .reshape((1, 1, extent))?;
    let dist = coords.unsqueeze(2)?.broadcast_sub(&idx)?.abs()?;
    Ok(dist.affine(-1.0, 1.0)?.relu()?)
}

/// Column `axis` of a `[B, 2]` tensor as `[B, 1]`.
fn axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    Ok(t.narrow(1, axis, 1)?)
}

/// Pixel coordinates in the source frame of the `g` glimpse samples along one axis.
fn window_coords(size: &Tensor, pos: &Tensor, g: usize, extent: usize) -> Result<Tensor> {
    let v = linspace(g, size.dtype(), size.device())?.unsqueeze(0)?;
    let u = v.broadcast_mul(size)?.broadcast_add(pos)?;
    Ok(u.affine((extent - 1) as f64 / 2.0, (extent - 1) as f64 / 2.0)?)
}

/// Pixel coordinates in the glimpse of the `extent` canvas pixels along one axis.
fn inverse_coords(size: &Tensor, pos: &Tensor, g: usize, extent: usize) -> Result<Tensor> {
    let u = linspace(extent, size.dtype(), size.device())?.unsqueeze(0)?;
    let v = u.broadcast_sub(pos)?.broadcast_div(size)?;
    Ok(v.affine((g - 1) as f64 / 2.0, (g - 1) as f64 / 2.0)?)
}

fn check_extent(name: &str, n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid(format!("{name} must be at least 2, got {n}")));
    }
    Ok(())
}

/// Batched crop: `frames [B, H, W]`, `size`/`position` `[B, 2]` -> glimpses `[B, g, g]`.
pub fn extract(frames: &Tensor, size: &Tensor, position: &Tensor, g: usize) -> Result<Tensor> {
    let (_, h, w) = frames.dims3()?;
    check_extent("frame height", h)?;
    check_extent("frame width", w)?;
    check_extent("glimpse size", g)?;
    let ys = window_coords(&axis(size, 1)?, &axis(position, 1)?, g, h)?;
    let xs = window_coords(&axis(size, 0)?, &axis(position, 0)?, g, w)?;
    let wy = interp_matrix(&ys, h)?;
    let wx = interp_matrix(&xs, w)?;
    Ok(wy.matmul(&frames.contiguous()?)?.matmul(&wx.transpose(1, 2)?)?)
}

/// Batched inverse warp: glimpses `[B, g, g]` pasted into zero canvases `[B, H, W]`.
pub fn paste(
    glimpses: &Tensor,
    size: &Tensor,
    position: &Tensor,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let (_, g, g2) = glimpses.dims3()?;
    if g != g2 {
        return Err(Error::invalid("glimpses must be square"));
    }
    check_extent("canvas height", h)?;
    check_extent("canvas width", w)?;
    check_extent("glimpse size", g)?;
    let ay = inverse_coords(&axis(size, 1)?, &axis(position, 1)?, g, h)?;
    let ax = inverse_coords(&axis(size, 0)?, &axis(position, 0)?, g, w)?;
    let uy = interp_matrix(&ay, g)?;
    let ux = interp_matrix(&ax, g)?;
    Ok(uy.matmul(&glimpses.contiguous()?)?.matmul(&ux.transpose(1, 2)?)?)
}

/// Single-frame crop of a `[H, W]` tensor.
pub fn st_extract(frame: &Tensor, b: &BoxParams, g: usize) -> Result<Tensor> {
    let (size, pos) = b.tensors(frame.dtype())?;
    Ok(extract(&frame.unsqueeze(0)?, &size, &pos, g)?.squeeze(0)?)
}

/// Single-glimpse paste of a `[g, g]` tensor onto an `h x w` canvas.
pub fn st_paste(glimpse: &Tensor, b: &BoxParams, h: usize, w: usize) -> Result<Tensor> {
    let (size, pos) = b.tensors(glimpse.dtype())?;
    Ok(paste(&glimpse.unsqueeze(0)?, &size, &pos, h, w)?.squeeze(0)?)
}

/// Bell-shaped multiplicative mask on generated glimpses.
#[derive(Debug, Clone, PartialEq)]
pub struct RegMask {
    pub g: usize,
    pub values: Vec<f64>,
    pub sigma_k: f64,
    pub flatten_p: f64,
}

impl RegMask {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.g + col]
    }

    pub fn to_tensor(&self, dtype: DType, dev: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (self.g, self.g), dev)?.to_dtype(dtype)?)
    }
}

/// Isotropic Gaussian on a `g x g` grid over `[-1, 1]²`, max-normalized, then
/// flattened towards one by `(k + p) / (1 + p)`.
pub fn regularization_kernel(g: usize, sigma_k: f64, flatten_p: f64) -> Result<RegMask> {
    if g == 0 {
        return Err(Error::invalid("mask size must be positive"));
    }
    if !(sigma_k > 0.0) || !sigma_k.is_finite() {
        return Err(Error::invalid(format!("sigma_K must be positive, got {sigma_k}")));
    }
    if !(flatten_p >= 0.0) {
        return Err(Error::invalid(format!("flattening must be non-negative, got {flatten_p}")));
    }
    let grid: Vec<f64> = if g == 1 {
        vec![0.0]
    } else {
        (0..g).map(|i| -1.0 + 2.0 * i as f64 / (g - 1) as f64).collect()
    };
    let two_var = 2.0 * sigma_k * sigma_k;
    let mut values: Vec<f64> = Vec::with_capacity(g * g);
    for y in &grid {
        for x in &grid {
            values.push((-(x * x + y * y) / two_var).exp());
        }
    }
    let max = values.iter().cloned().fold(f64::MIN, f64::max);
    for v in &mut values {
        *v /= max;
        if flatten_p.is_infinite() {
            *v = 1.0;
        } else {
            *v = (*v + flatten_p) / (1.0 + flatten_p);
        }
    }
    Ok(RegMask {
        g,
        values,
        sigma_k,
        flatten_p,
    })
}
