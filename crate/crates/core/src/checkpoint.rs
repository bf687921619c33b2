//! Versioned binary checkpoint.
//!
//! Layout, all integers and floats little-endian:
//!
//! | field            | encoding                                             |
//! |------------------|------------------------------------------------------|
//! | magic            | `CDKITCKP`                                           |
//! | version          | u32                                                  |
//! | file length      | u64, total bytes including the checksum              |
//! | config           | u32 length + UTF-8 text of the resolved run config   |
//! | sample shape     | u8 kind (0 vector, 1 image) + u64 dims               |
//! | progress         | u64 epoch, u64 step                                  |
//! | rng streams      | u64 init, u64 augment, u64 shuffle                   |
//! | adam             | u64 t, f64 beta1, f64 beta2, f64 eps                 |
//! | manifest         | u32 count, then per entry: u16 name length, name,    |
//! |                  | u8 rank, u64 dims, u64 offset, u64 length            |
//! | blob             | u64 count + f64 values                               |
//! | checksum         | u32 CRC-32 of every preceding byte                   |
//!
//! Manifest names carry a `param/`, `buffer/`, `adam_m/` or `adam_v/` prefix;
//! offsets and lengths count f64 elements in the blob.

use std::fs;
use std::path::Path;

use crate::autodiff::ImageGeom;
use crate::config::RunConfig;
use crate::data::SampleShape;
use crate::error::{Error, Result};
use crate::nn::{CdModel, Named};
use crate::tensor::Tensor;
use crate::train::AdamState;

pub const MAGIC: &[u8; 8] = b"CDKITCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Seeds of the three random streams. Every draw is keyed by
/// (stream seed, epoch, batch), so these plus the epoch counter are the
/// complete generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub init: u64,
    pub augment: u64,
    pub shuffle: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub sample_shape: SampleShape,
    pub params: Vec<Named<f64>>,
    pub buffers: Vec<Named<f64>>,
    pub adam: AdamState<f64>,
    pub rng: RngState,
    pub epoch: u64,
    pub step: u64,
}

impl Checkpoint {
    /// Rebuilds the network with the stored weights and buffers.
    pub fn model(&self) -> Result<CdModel<f64>> {
        let mut model = CdModel::new(self.config.model_config(self.sample_shape)?, self.rng.init)?;
        copy_named(model.params_mut(), &self.params, "parameter")?;
        copy_named(model.buffers_mut(), &self.buffers, "buffer")?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, FORMAT_VERSION);
        let len_at = w.len();
        put_u64(&mut w, 0);

        let text = self.config.to_text();
        put_u32(&mut w, text.len() as u32);
        w.extend_from_slice(text.as_bytes());

        match self.sample_shape {
            SampleShape::Vector(d) => {
                w.push(0);
                put_u64(&mut w, d as u64);
            }
            SampleShape::Image(g) => {
                w.push(1);
                for d in [g.channels, g.height, g.width] {
                    put_u64(&mut w, d as u64);
                }
            }
        }
        put_u64(&mut w, self.epoch);
        put_u64(&mut w, self.step);
        for s in [self.rng.init, self.rng.augment, self.rng.shuffle] {
            put_u64(&mut w, s);
        }
        put_u64(&mut w, self.adam.t);
        for v in [self.adam.beta1, self.adam.beta2, self.adam.eps] {
            put_f64(&mut w, v);
        }

        let mut entries: Vec<(String, &[usize], &[f64])> = Vec::new();
        for p in &self.params {
            entries.push((format!("param/{}", p.name), p.tensor.shape(), p.tensor.data()));
        }
        for b in &self.buffers {
            entries.push((format!("buffer/{}", b.name), b.tensor.shape(), b.tensor.data()));
        }
        for (prefix, moments) in [("adam_m", &self.adam.m), ("adam_v", &self.adam.v)] {
            for (p, m) in self.params.iter().zip(moments.iter()) {
                entries.push((format!("{prefix}/{}", p.name), p.tensor.shape(), m));
            }
        }
        put_u32(&mut w, entries.len() as u32);
        let mut offset = 0u64;
        for (name, shape, data) in &entries {
            put_u16(&mut w, name.len() as u16);
            w.extend_from_slice(name.as_bytes());
            w.push(shape.len() as u8);
            for &d in *shape {
                put_u64(&mut w, d as u64);
            }
            put_u64(&mut w, offset);
            put_u64(&mut w, data.len() as u64);
            offset += data.len() as u64;
        }
        put_u64(&mut w, offset);
        for (_, _, data) in &entries {
            for &v in *data {
                put_f64(&mut w, v);
            }
        }

        let total = (w.len() + 4) as u64;
        w[len_at..len_at + 8].copy_from_slice(&total.to_le_bytes());
        let crc = crc32fast::hash(&w);
        put_u32(&mut w, crc);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let declared = r.u64()?;
        if declared != bytes.len() as u64 {
            return Err(Error::Format(format!(
                "length mismatch: header declares {declared} bytes, file has {}",
                bytes.len()
            )));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: r.pos };

        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let config = RunConfig::parse(text)?;

        let sample_shape = match r.u8()? {
            0 => SampleShape::Vector(r.usize()?),
            1 => SampleShape::Image(ImageGeom {
                channels: r.usize()?,
                height: r.usize()?,
                width: r.usize()?,
            }),
            k => return Err(Error::Format(format!("unknown sample shape tag {k}"))),
        };
        let epoch = r.u64()?;
        let step = r.u64()?;
        let rng = RngState {
            init: r.u64()?,
            augment: r.u64()?,
            shuffle: r.u64()?,
        };
        let t = r.u64()?;
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);

        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("manifest name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let offset = r.usize()?;
            let len = r.usize()?;
            manifest.push((name, shape, offset, len));
        }
        let blob_len = r.usize()?;
        let raw = r.take(blob_len.checked_mul(8).ok_or_else(|| Error::Format("blob too large".into()))?)?;
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} unexpected trailing bytes", body.len() - r.pos)));
        }
        let blob: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let (mut params, mut buffers, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (name, shape, offset, len) in manifest {
            let end = offset
                .checked_add(len)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| Error::Format(format!("entry {name} lies outside the blob")))?;
            let data = blob[offset..end].to_vec();
            let tensor = Tensor::new(shape, data)
                .map_err(|_| Error::Format(format!("entry {name}: shape does not match length")))?;
            let (prefix, rest) = name
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("entry {name} has no prefix")))?;
            let named = Named {
                name: rest.to_string(),
                tensor,
            };
            match prefix {
                "param" => params.push(named),
                "buffer" => buffers.push(named),
                "adam_m" => m.push(named),
                "adam_v" => v.push(named),
                _ => return Err(Error::Format(format!("entry {name} has unknown prefix"))),
            }
        }
        for (what, moments) in [("adam_m", &m), ("adam_v", &v)] {
            let aligned = moments.len() == params.len()
                && moments
                    .iter()
                    .zip(&params)
                    .all(|(a, p)| a.name == p.name && a.tensor.shape() == p.tensor.shape());
            if !aligned {
                return Err(Error::Format(format!("{what} entries do not match the parameters")));
            }
        }
        let adam = AdamState {
            m: m.into_iter().map(|n| n.tensor.into_data()).collect(),
            v: v.into_iter().map(|n| n.tensor.into_data()).collect(),
            beta1,
            beta2,
            eps,
            t,
        };
        Ok(Self {
            config,
            sample_shape,
            params,
            buffers,
            adam,
            rng,
            epoch,
            step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn copy_named(dst: &mut [Named<f64>], src: &[Named<f64>], what: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} {what}s, model expects {}",
            src.len(),
            dst.len()
        )));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        if d.name != s.name || d.tensor.shape() != s.tensor.shape() {
            return Err(Error::Format(format!(
                "{what} {} {:?} does not match model's {} {:?}",
                s.name,
                s.tensor.shape(),
                d.name,
                d.tensor.shape()
            )));
        }
        d.tensor.data_mut().copy_from_slice(s.tensor.data());
    }
    Ok(())
}

fn put_u16(w: &mut Vec<u8>, v: u16) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in usize")))
    }

    fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::train::Trainer;

    fn small() -> Checkpoint {
        let mut cfg = RunConfig::default();
        cfg.train.batch_size = 4;
        cfg.model.hidden_dims = vec![5];
        cfg.model.backbone_dim = 3;
        cfg.model.latent_dim = 3;
        Trainer::new(&cfg, SampleShape::Vector(6)).unwrap().checkpoint()
    }

    #[test]
    fn round_trip_bytes() {
        let c = small();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn distinct_errors() {
        let bytes = small().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..5]), Err(Error::Format(_))));

        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Version { found: 9, .. })));

        let mut c = bytes.clone();
        let mid = c.len() / 2;
        c[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&c), Err(Error::Checksum { .. })));

        let mut m = bytes;
        m[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&m), Err(Error::Format(_))));
    }
}
