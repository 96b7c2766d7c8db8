//! Versioned binary parameter archives.
//!
//! Layout (little-endian): magic `VTSSICKP`, `u32` format version, `u64`
//! length plus config JSON, `u64` global step, `u32` parameter count, then per
//! parameter: `u32` name length, name, `u8` dtype tag, `u32` rank, `u64` dims,
//! raw element bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::model::{Vtssi, VtssiConfig};

pub const MAGIC: &[u8; 8] = b"VTSSICKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: VtssiConfig,
    pub global_step: u64,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(model: &Vtssi, global_step: u64) -> Self {
        Self {
            config: model.config().clone(),
            global_step,
            params: model
                .store()
                .vars()
                .into_iter()
                .map(|(n, v)| (n, v.as_tensor().detach()))
                .collect(),
        }
    }

    /// Rebuilds the model and loads every parameter; names must match exactly.
    pub fn restore(&self) -> Result<Vtssi> {
        let model = Vtssi::new(&self.config, 0)?;
        let expected: Vec<String> = model.store().vars().into_iter().map(|(n, _)| n).collect();
        let got: Vec<&String> = self.params.iter().map(|(n, _)| n).collect();
        if expected.len() != got.len() || expected.iter().zip(&got).any(|(a, b)| a != *b) {
            return Err(Error::Checkpoint("parameter set does not match the configured model".into()));
        }
        for (name, t) in &self.params {
            model.store().set(name, &t.to_dtype(model.dtype())?)?;
        }
        Ok(model)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config)?;
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&self.global_step.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let dims = t.dims().to_vec();
            let t = t.flatten_all()?;
            let (tag, bytes): (u8, Vec<u8>) = match t.dtype() {
                DType::F32 => (0, t.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
                DType::F64 => (1, t.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
                other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
            };
            w.write_all(&[tag])?;
            w.write_all(&(dims.len() as u32).to_le_bytes())?;
            for d in dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let cfg_len = read_u64(r)? as usize;
        let config: VtssiConfig = serde_json::from_slice(&read_bytes(r, cfg_len)?)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let global_step = read_u64(r)?;
        let count = read_u32(r)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, len)?).map_err(|_| Error::Checkpoint("bad name".into()))?;
            let mut tag = [0u8];
            r.read_exact(&mut tag).map_err(truncated)?;
            let rank = read_u32(r)? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let t = match tag[0] {
                0 => {
                    let b = read_bytes(r, 4 * n)?;
                    let v: Vec<f32> = b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                1 => {
                    let b = read_bytes(r, 8 * n)?;
                    let v: Vec<f64> = b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
            };
            params.push((name, t));
        }
        let mut rest = [0u8];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config,
            global_step,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn truncated(_: std::io::Error) -> Error {
    Error::Checkpoint("truncated file".into())
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    if n > 1 << 32 {
        return Err(Error::Checkpoint("implausible length".into()));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn round_trip_is_exact() {
        let cfg = VtssiConfig::compact(Variant::Vtssi, [16, 16], 6, 3, 3);
        let model = Vtssi::new(&cfg, 7).unwrap();
        let ck = Checkpoint::capture(&model, 1234);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.global_step, 1234);
        assert_eq!(back.config, cfg);
        let restored = back.restore().unwrap();
        for ((na, a), (nb, b)) in model.store().vars().iter().zip(restored.store().vars()) {
            assert_eq!(na, &nb);
            let a = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = b.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut again = Vec::new();
        Checkpoint::capture(&restored, 1234).write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_corruption() {
        let cfg = VtssiConfig::compact(Variant::Air, [16, 16], 4, 1, 1);
        let ck = Checkpoint::capture(&Vtssi::new(&cfg, 1).unwrap(), 0);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
    }
}
