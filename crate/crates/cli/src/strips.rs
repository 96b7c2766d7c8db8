//! Frame strips: generated frames, and generated frames over ground truth.

use std::path::Path;

use image::{Rgb, RgbImage};
use vtssi::data::FrameSequence;

const GAP: u32 = 2;

fn strip_canvas(t: usize, h: usize, w: usize, scale: u32) -> RgbImage {
    let width = t as u32 * (w as u32 * scale + GAP) - GAP;
    RgbImage::from_pixel(width, h as u32 * scale, Rgb([255, 255, 255]))
}

fn put_block(img: &mut RgbImage, x0: u32, y0: u32, scale: u32, px: Rgb<u8>) {
    for dy in 0..scale {
        for dx in 0..scale {
            img.put_pixel(x0 + dx, y0 + dy, px);
        }
    }
}

fn byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale strip of `frames`, one tile per step.
pub fn generated(frames: &FrameSequence, scale: u32) -> RgbImage {
    let (t, h, w) = (frames.t, frames.h, frames.w);
    let mut img = strip_canvas(t, h, w, scale);
    for k in 0..t {
        let f = frames.frame(k);
        let x_off = k as u32 * (w as u32 * scale + GAP);
        for r in 0..h {
            for c in 0..w {
                let v = byte(f[r * w + c]);
                put_block(&mut img, x_off + c as u32 * scale, r as u32 * scale, scale, Rgb([v, v, v]));
            }
        }
    }
    img
}

/// Ground truth in the green channel, generated frames in red and blue,
/// predicted centers as small yellow crosses; tiles after `observed` get a red underline.
pub fn superimposed(
    truth: &FrameSequence,
    generated: &FrameSequence,
    centers: &[Vec<[f64; 2]>],
    observed: usize,
    scale: u32,
) -> RgbImage {
    let (t, h, w) = (generated.t.min(truth.t), generated.h, generated.w);
    let mut img = strip_canvas(t, h, w, scale);
    for k in 0..t {
        let (g, p) = (truth.frame(k), generated.frame(k));
        let x_off = k as u32 * (w as u32 * scale + GAP);
        for r in 0..h {
            for c in 0..w {
                let (gv, pv) = (byte(g[r * w + c]), byte(p[r * w + c]));
                put_block(&mut img, x_off + c as u32 * scale, r as u32 * scale, scale, Rgb([pv, gv, pv]));
            }
        }
        for track in centers {
            let Some([x, y]) = track.get(k) else { continue };
            let (cx, cy) = ((x + 0.5) * scale as f64, (y + 0.5) * scale as f64);
            for d in -3i64..=3 {
                for (px, py) in [(cx + d as f64, cy), (cx, cy + d as f64)] {
                    if px >= 0.0 && py >= 0.0 && px < (w as u32 * scale) as f64 && py < (h as u32 * scale) as f64 {
                        img.put_pixel(x_off + px as u32, py as u32, Rgb([255, 220, 0]));
                    }
                }
            }
        }
        if k >= observed {
            for x in 0..w as u32 * scale {
                img.put_pixel(x_off + x, h as u32 * scale - 1, Rgb([220, 0, 0]));
            }
        }
    }
    img
}

pub fn save(img: &RgbImage, path: &Path) -> Result<(), String> {
    img.save(path).map_err(|e| format!("{}: {e}", path.display()))
}
