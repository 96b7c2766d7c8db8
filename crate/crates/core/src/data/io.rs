//! On-disk dataset container.
//!
//! A dataset directory holds three files:
//!
//! * `frames.bin`: little-endian `u32` header `[S, T, H, W]` followed by
//!   `S*T*H*W` bytes of `u8` intensities (row-major).
//! * `annotations.jsonl`: one [`SequenceAnnotation`] per line, in order.
//! * `manifest.json`: a [`DatasetManifest`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{child_seed, gen_sequence_with, quantize, DataConfig, FrameSequence, SequenceAnnotation, SpriteBank};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";
const FRAMES_FILE: &str = "frames.bin";
const ANNOTATIONS_FILE: &str = "annotations.jsonl";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub config: DataConfig,
    pub sequences: usize,
    pub seq_len: usize,
    pub height: usize,
    pub width: usize,
    /// `count_histogram[k]` = number of sequences with `k` objects.
    pub count_histogram: Vec<usize>,
}

/// A dataset held in memory as quantized frames plus annotations.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    frames: Vec<u8>,
    annotations: Vec<SequenceAnnotation>,
}

impl Dataset {
    /// Generates `n` sequences; sequence `i` uses `child_seed(cfg.seed, i)`.
    pub fn generate(cfg: &DataConfig, n: usize) -> Result<Self> {
        cfg.validate()?;
        let bank = SpriteBank::for_config(cfg)?;
        let [h, w] = cfg.frame_hw;
        let mut frames = Vec::with_capacity(n * cfg.seq_len * h * w);
        let mut annotations = Vec::with_capacity(n);
        for i in 0..n {
            let (f, a) = gen_sequence_with(cfg, &bank, child_seed(cfg.seed, i as u64))?;
            frames.extend(f.data.iter().map(|v| quantize(*v)));
            annotations.push(a);
        }
        let manifest = manifest_for(cfg, &annotations);
        Ok(Self {
            manifest,
            frames,
            annotations,
        })
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.manifest.seq_len
    }

    pub fn frame_hw(&self) -> [usize; 2] {
        [self.manifest.height, self.manifest.width]
    }

    fn seq_bytes(&self, i: usize) -> &[u8] {
        let n = self.manifest.seq_len * self.manifest.height * self.manifest.width;
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn annotation(&self, i: usize) -> &SequenceAnnotation {
        &self.annotations[i]
    }

    pub fn annotations(&self) -> &[SequenceAnnotation] {
        &self.annotations
    }

    pub fn sequence(&self, i: usize) -> (FrameSequence, &SequenceAnnotation) {
        let frames = FrameSequence {
            t: self.manifest.seq_len,
            h: self.manifest.height,
            w: self.manifest.width,
            data: self.seq_bytes(i).iter().map(|b| *b as f32 / 255.0).collect(),
        };
        (frames, &self.annotations[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (FrameSequence, &SequenceAnnotation)> + '_ {
        (0..self.len()).map(move |i| self.sequence(i))
    }

    /// Frames `[B, len, H, W]` for the given sequence indices, truncated to a prefix of `len`.
    pub fn batch(&self, indices: &[usize], len: usize, dtype: DType) -> Result<Tensor> {
        let (t, h, w) = (self.manifest.seq_len, self.manifest.height, self.manifest.width);
        if len > t {
            return Err(Error::invalid(format!("prefix {len} longer than sequences ({t})")));
        }
        let mut data = Vec::with_capacity(indices.len() * len * h * w);
        for &i in indices {
            let bytes = &self.seq_bytes(i)[..len * h * w];
            data.extend(bytes.iter().map(|b| *b as f32 / 255.0));
        }
        Ok(Tensor::from_vec(data, (indices.len(), len, h, w), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// First `n` sequences as a new dataset.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per = self.manifest.seq_len * self.manifest.height * self.manifest.width;
        let annotations = self.annotations[..n].to_vec();
        Dataset {
            manifest: manifest_for(&self.manifest.config, &annotations),
            frames: self.frames[..n * per].to_vec(),
            annotations,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let m = &self.manifest;
        let mut out = BufWriter::new(File::create(dir.join(FRAMES_FILE))?);
        for d in [m.sequences, m.seq_len, m.height, m.width] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        out.write_all(&self.frames)?;
        out.flush()?;
        let mut ann = BufWriter::new(File::create(dir.join(ANNOTATIONS_FILE))?);
        for a in &self.annotations {
            serde_json::to_writer(&mut ann, a)?;
            ann.write_all(b"\n")?;
        }
        ann.flush()?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(m)?)?;
        Ok(())
    }
}

fn manifest_for(cfg: &DataConfig, annotations: &[SequenceAnnotation]) -> DatasetManifest {
    let mut hist = vec![0; cfg.max_objects + 1];
    for a in annotations {
        if a.count >= hist.len() {
            hist.resize(a.count + 1, 0);
        }
        hist[a.count] += 1;
    }
    DatasetManifest {
        format_version: FORMAT_VERSION.to_string(),
        config: cfg.clone(),
        sequences: annotations.len(),
        seq_len: cfg.seq_len,
        height: cfg.frame_hw[0],
        width: cfg.frame_hw[1],
        count_histogram: hist,
    }
}

/// Generates `n` sequences and writes them to `dir`.
pub fn write_dataset(cfg: &DataConfig, n: usize, dir: &Path) -> Result<DatasetManifest> {
    let ds = Dataset::generate(cfg, n)?;
    ds.save(dir)?;
    Ok(ds.manifest)
}

/// Loads and cross-checks a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let bad = |reason: String| Error::Dataset {
        path: dir.to_path_buf(),
        reason,
    };
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)
        .map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let mut file = BufReader::new(File::open(dir.join(FRAMES_FILE))?);
    let mut header = [0u8; 16];
    file.read_exact(&mut header)
        .map_err(|_| bad("truncated frame header".into()))?;
    let dims: Vec<usize> = header
        .chunks(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = [manifest.sequences, manifest.seq_len, manifest.height, manifest.width];
    if dims != expected {
        return Err(bad(format!("frame header {dims:?} disagrees with manifest {expected:?}")));
    }
    let mut frames = Vec::with_capacity(dims.iter().product());
    file.read_to_end(&mut frames)?;
    if frames.len() != dims.iter().product::<usize>() {
        return Err(bad(format!(
            "frame blob has {} bytes, expected {}",
            frames.len(),
            dims.iter().product::<usize>()
        )));
    }
    let mut annotations = Vec::with_capacity(manifest.sequences);
    for (i, line) in BufReader::new(File::open(dir.join(ANNOTATIONS_FILE))?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: SequenceAnnotation =
            serde_json::from_str(&line).map_err(|e| bad(format!("annotation line {}: {e}", i + 1)))?;
        if a.centers.len() != manifest.seq_len || a.centers.iter().any(|c| c.len() != a.count) {
            return Err(bad(format!("annotation line {} has inconsistent centers", i + 1)));
        }
        annotations.push(a);
    }
    if annotations.len() != manifest.sequences {
        return Err(bad(format!(
            "{} annotations for {} sequences",
            annotations.len(),
            manifest.sequences
        )));
    }
    Ok(Dataset {
        manifest,
        frames,
        annotations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            frame_hw: [24, 24],
            seq_len: 5,
            sprite_px: [6, 9],
            seed: 11,
            ..DataConfig::default()
        }
    }

    #[test]
    fn round_trip_is_lossless_after_quantization() -> Result<()> {
        let dir = tempfile::tempdir()?;
        let cfg = small();
        let written = write_dataset(&cfg, 6, dir.path())?;
        let ds = read_dataset(dir.path())?;
        assert_eq!(ds.manifest, written);
        for i in 0..6 {
            let (f, a) = super::super::gen_sequence(&cfg, child_seed(cfg.seed, i as u64))?;
            let (g, b) = ds.sequence(i);
            assert_eq!(g, f.quantized());
            assert_eq!(b, &a);
        }
        Ok(())
    }

    #[test]
    fn corrupt_containers_are_rejected() -> Result<()> {
        let dir = tempfile::tempdir()?;
        write_dataset(&small(), 3, dir.path())?;
        let frames = std::fs::read(dir.path().join(FRAMES_FILE))?;
        std::fs::write(dir.path().join(FRAMES_FILE), &frames[..frames.len() - 1])?;
        assert!(matches!(read_dataset(dir.path()), Err(Error::Dataset { .. })));

        let dir = tempfile::tempdir()?;
        write_dataset(&small(), 3, dir.path())?;
        let m = std::fs::read_to_string(dir.path().join(MANIFEST_FILE))?;
        std::fs::write(
            dir.path().join(MANIFEST_FILE),
            m.replace("\"format_version\": \"1\"", "\"format_version\": \"9\""),
        )?;
        assert!(matches!(read_dataset(dir.path()), Err(Error::Dataset { .. })));
        Ok(())
    }

    #[test]
    fn batch_takes_prefixes() -> Result<()> {
        let ds = Dataset::generate(&small(), 4)?;
        let b = ds.batch(&[2, 0], 3, DType::F32)?;
        assert_eq!(b.dims(), &[2, 3, 24, 24]);
        assert!(ds.batch(&[0], 6, DType::F32).is_err());
        Ok(())
    }
}
