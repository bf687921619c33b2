//! Datasets: synthetic generators, the CIFAR binary format, a simple CSV
//! layout, and minibatch index streams.
//!
//! Training code only ever sees [`Samples`]. Labels live on
//! [`LabeledDataset`] and are handed to evaluation separately.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::ImageGeom;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const CIFAR_GEOM: ImageGeom = ImageGeom {
    channels: 3,
    height: 32,
    width: 32,
};
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_MAX_LABEL: u8 = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleShape {
    Vector(usize),
    Image(ImageGeom),
}

impl SampleShape {
    pub fn len(&self) -> usize {
        match self {
            SampleShape::Vector(d) => *d,
            SampleShape::Image(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self) -> Option<ImageGeom> {
        match self {
            SampleShape::Image(g) => Some(*g),
            SampleShape::Vector(_) => None,
        }
    }
}

/// Unlabeled raw samples stored row-major, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    shape: SampleShape,
    data: Vec<f64>,
}

impl Samples {
    pub fn new(shape: SampleShape, data: Vec<f64>) -> Result<Self> {
        let len = shape.len();
        if len == 0 || data.len() % len != 0 {
            return Err(Error::Contract(format!(
                "{} values do not form whole samples of length {len}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> SampleShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let l = self.shape.len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Copies the selected samples into a contiguous `[n, len]` buffer.
    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().flat_map(|&i| self.sample(i).iter().copied()).collect()
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.len(), self.shape.len()], self.data.clone()).expect("whole samples")
    }

    /// Index batches of one epoch: a seeded shuffle, trailing partial batch
    /// dropped.
    pub fn batches(&self, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Vec<usize>>> {
        batch_indices(self.len(), batch_size, shuffle_seed)
    }
}

pub fn batch_indices(len: usize, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > len {
        return Err(Error::Contract(format!(
            "batch size {batch_size} must be in 1..={len}"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_for(shuffle_seed, 0));
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    samples: Samples,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(samples: Samples, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != samples.len() {
            return Err(Error::Contract(format!(
                "{} labels for {} samples",
                labels.len(),
                samples.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!(
                "label {l} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            samples,
            labels,
            num_classes,
        })
    }

    /// The training view: samples only.
    pub fn samples(&self) -> &Samples {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Isotropic unit-variance Gaussian clusters. Class `c` is centered at
/// `separation · e_c` for `c < dim`; further classes use seeded random unit
/// directions. Samples are stored class by class.
pub fn gen_gaussian_mixture(
    num_classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes == 0 || n_per_class == 0 || dim == 0 || !(separation >= 0.0) {
        return Err(Error::Parameter(
            "gaussian mixture needs positive counts, dim and a non-negative separation".into(),
        ));
    }
    let mut rng = rng_for(seed, 0);
    let mut centers = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut dir = vec![0.0; dim];
        if c < dim {
            dir[c] = 1.0;
        } else {
            dir.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v /= n);
        }
        centers.push(dir);
    }
    let mut data = Vec::with_capacity(num_classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    for (c, dir) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &d in dir {
                let noise: f64 = rng.sample(StandardNormal);
                data.push(separation * d + noise);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Samples::new(SampleShape::Vector(dim), data)?, labels, num_classes)
}

/// Small synthetic images whose class decides a base colour and a stripe
/// orientation/frequency, with per-sample phase, contrast and pixel noise.
/// Values are multiples of 1/255 so they survive the byte format exactly.
pub fn gen_pattern_images(
    num_classes: usize,
    n_per_class: usize,
    geom: ImageGeom,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes == 0 || n_per_class == 0 || geom.is_empty() {
        return Err(Error::Parameter("pattern images need positive sizes".into()));
    }
    let mut rng = rng_for(seed, 1);
    let mut data = Vec::with_capacity(num_classes * n_per_class * geom.len());
    let mut labels = Vec::new();
    for c in 0..num_classes {
        let hue = c as f64 / num_classes as f64;
        let base: Vec<f64> = (0..geom.channels)
            .map(|ch| 0.5 + 0.35 * (std::f64::consts::TAU * (hue + ch as f64 / 3.0)).cos())
            .collect();
        let angle = std::f64::consts::PI * (c % 4) as f64 / 4.0;
        let freq = 1.0 + (c / 4) as f64;
        for _ in 0..n_per_class {
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp: f64 = rng.gen_range(0.15..0.3);
            for &b in &base {
                for y in 0..geom.height {
                    for x in 0..geom.width {
                        let u = (x as f64 * angle.cos() + y as f64 * angle.sin())
                            / geom.width as f64;
                        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.05;
                        let v = b + amp * (std::f64::consts::TAU * freq * u + phase).sin() + noise;
                        data.push(quantize(v) as f64 / 255.0);
                    }
                }
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Samples::new(SampleShape::Image(geom), data)?, labels, num_classes)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses whole CIFAR-10 records: a label byte then 3072 pixel bytes
/// (R, G, B planes of 32×32, row-major), pixels scaled by 1/255.
pub fn parse_cifar(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::Format(format!(
            "truncated record at byte offset {offset}: {} of {CIFAR_RECORD} bytes",
            bytes.len() - offset
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > CIFAR_MAX_LABEL {
            return Err(Error::Format(format!(
                "label {} > {CIFAR_MAX_LABEL} at byte offset {}",
                rec[0],
                r * CIFAR_RECORD
            )));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    LabeledDataset::new(
        Samples::new(SampleShape::Image(CIFAR_GEOM), data)?,
        labels,
        CIFAR_MAX_LABEL as usize + 1,
    )
}

pub fn read_cifar_binary(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar(&bytes)
}

/// Encodes 3×32×32 samples with labels ≤ 9 into CIFAR records. Pixels are
/// rounded to the nearest multiple of 1/255.
pub fn encode_cifar(ds: &LabeledDataset) -> Result<Vec<u8>> {
    if ds.samples().shape() != SampleShape::Image(CIFAR_GEOM) {
        return Err(Error::Contract("CIFAR records hold 3x32x32 images".into()));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (i, &l) in ds.labels().iter().enumerate() {
        if l > CIFAR_MAX_LABEL as usize {
            return Err(Error::Contract(format!("label {l} does not fit CIFAR-10")));
        }
        out.push(l as u8);
        out.extend(ds.samples().sample(i).iter().map(|&v| quantize(v)));
    }
    Ok(out)
}

pub fn write_cifar_binary(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cifar(ds)?).map_err(|e| Error::io(path, e))
}

/// CSV with header `f0,…,f{d-1},label`, one vector sample per row.
pub fn write_csv(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let d = ds.samples().shape().len();
    let mut s: String = (0..d).map(|j| format!("f{j},")).collect();
    s.push_str("label\n");
    for (i, l) in ds.labels().iter().enumerate() {
        for v in ds.samples().sample(i) {
            s.push_str(&format!("{v},"));
        }
        s.push_str(&format!("{l}\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty CSV", path.display())))?;
    let d = header.split(',').count().saturating_sub(1);
    if d == 0 {
        return Err(Error::Format("CSV needs at least one feature column".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d + 1 {
            return Err(Error::Format(format!(
                "line {}: expected {} cells, found {}",
                ln + 2,
                d + 1,
                cells.len()
            )));
        }
        for c in &cells[..d] {
            data.push(c.trim().parse::<f64>().map_err(|e| {
                Error::Format(format!("line {}: {e}", ln + 2))
            })?);
        }
        labels.push(cells[d].trim().parse::<usize>().map_err(|e| {
            Error::Format(format!("line {}: label: {e}", ln + 2))
        })?);
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(Samples::new(SampleShape::Vector(d), data)?, labels, k)
}
