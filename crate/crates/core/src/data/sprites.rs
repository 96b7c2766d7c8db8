//! Sprite rasters: procedural anti-aliased shapes or digits from an IDX image file.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Grayscale raster with intensities in `[0, 1]` and its tight bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Sprite {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f32>,
    /// Tight bounding box of nonzero pixels: `(row_min, row_max, col_min, col_max)`.
    pub bbox: (usize, usize, usize, usize),
}

impl Sprite {
    pub fn new(h: usize, w: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != h * w {
            return Err(Error::invalid("sprite raster has the wrong length"));
        }
        let bbox = tight_bbox(&pixels, h, w)
            .ok_or_else(|| Error::invalid("sprite has no nonzero pixel"))?;
        Ok(Self { h, w, pixels, bbox })
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.w + c]
    }

    /// Center of the tight bounding box in sprite pixel coordinates, `(x, y)`.
    pub fn bbox_center(&self) -> [f64; 2] {
        let (r0, r1, c0, c1) = self.bbox;
        [(c0 + c1) as f64 / 2.0, (r0 + r1) as f64 / 2.0]
    }

    /// Bounding-box extent relative to its center: `([x_lo, y_lo], [x_hi, y_hi])`.
    pub fn half_extents(&self) -> ([f64; 2], [f64; 2]) {
        let (r0, r1, c0, c1) = self.bbox;
        let [cx, cy] = self.bbox_center();
        ([c0 as f64 - cx, r0 as f64 - cy], [c1 as f64 - cx, r1 as f64 - cy])
    }

    /// Bounding-box width and height in pixels (inclusive extent minus one).
    pub fn bbox_span(&self) -> [f64; 2] {
        let (r0, r1, c0, c1) = self.bbox;
        [(c1 - c0) as f64, (r1 - r0) as f64]
    }
}

/// `(row_min, row_max, col_min, col_max)` of strictly positive entries.
pub fn tight_bbox(pixels: &[f32], h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for r in 0..h {
        for c in 0..w {
            if pixels[r * w + c] > 0.0 {
                bbox = Some(match bbox {
                    None => (r, r, c, c),
                    Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                });
            }
        }
    }
    bbox
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Rectangle,
    Ellipse,
    Cross,
}

const SUPERSAMPLE: usize = 4;

/// Random anti-aliased rectangle, ellipse or cross with extents in `[lo, hi]` pixels.
pub fn procedural<R: Rng>(rng: &mut R, lo: usize, hi: usize) -> Sprite {
    let shape = match rng.random_range(0..3) {
        0 => Shape::Rectangle,
        1 => Shape::Ellipse,
        _ => Shape::Cross,
    };
    let ext_w = rng.random_range(lo as f64..=hi as f64);
    let ext_h = rng.random_range(lo as f64..=hi as f64);
    let intensity = rng.random_range(0.7f32..=1.0);
    let arm = rng.random_range(0.25..=0.4);
    let h = ext_h.ceil() as usize + 2;
    let w = ext_w.ceil() as usize + 2;
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (ry, rx) = (ext_h / 2.0, ext_w / 2.0);
    let inside = |y: f64, x: f64| -> bool {
        let (dy, dx) = ((y - cy).abs(), (x - cx).abs());
        match shape {
            Shape::Rectangle => dy <= ry && dx <= rx,
            Shape::Ellipse => (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0,
            Shape::Cross => (dy <= ry && dx <= rx * arm) || (dx <= rx && dy <= ry * arm),
        }
    };
    let mut pixels = vec![0f32; h * w];
    let n = SUPERSAMPLE;
    for r in 0..h {
        for c in 0..w {
            let mut hits = 0;
            for sy in 0..n {
                for sx in 0..n {
                    let y = r as f64 + (sy as f64 + 0.5) / n as f64;
                    let x = c as f64 + (sx as f64 + 0.5) / n as f64;
                    if inside(y, x) {
                        hits += 1;
                    }
                }
            }
            pixels[r * w + c] = intensity * hits as f32 / (n * n) as f32;
        }
    }
    Sprite::new(h, w, pixels).expect("procedural shapes always cover a pixel")
}

/// Image rasters loaded from an IDX3 (`ubyte`) file such as the MNIST digit files.
#[derive(Debug, Clone)]
pub struct ImageBank {
    pub rows: usize,
    pub cols: usize,
    images: Vec<u8>,
}

impl ImageBank {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_idx_bytes(&bytes).map_err(|reason| Error::Dataset {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn from_idx_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let be = |i: usize| -> std::result::Result<usize, String> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
                .ok_or_else(|| "truncated IDX header".to_string())
        };
        if be(0)? != 0x0803 {
            return Err("not an IDX3 unsigned-byte file".into());
        }
        let (n, rows, cols) = (be(4)?, be(8)?, be(12)?);
        let body = &bytes[16..];
        if body.len() != n * rows * cols || n == 0 {
            return Err(format!("expected {n} images of {rows}x{cols}"));
        }
        Ok(Self {
            rows,
            cols,
            images: body.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len() / (self.rows * self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sprite(&self, index: usize) -> Result<Sprite> {
        let n = self.rows * self.cols;
        let raw = &self.images[index * n..(index + 1) * n];
        Sprite::new(
            self.rows,
            self.cols,
            raw.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Sprite> {
        // Blank rasters cannot be tracked; skip them.
        for _ in 0..100 {
            if let Ok(s) = self.sprite(rng.random_range(0..self.len())) {
                return Ok(s);
            }
        }
        Err(Error::invalid("image bank contains only blank images"))
    }
}
