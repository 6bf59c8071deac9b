//! Seeded synthetic image data and an IDX reader/writer.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::nn::{Shape3, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    class_count: usize,
    sample_shape: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidClass { class: bad, classes: class_count });
        }
        let sample_shape = images.first().map(|t| t.shape().to_vec()).unwrap_or_default();
        if images.iter().any(|t| t.shape() != sample_shape.as_slice()) {
            return Err(Error::InvalidArgument("images have mixed shapes".into()));
        }
        if images.iter().flat_map(|t| t.data()).any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { images, labels, class_count, sample_shape })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            sample_shape: self.sample_shape.clone(),
        }
    }

    /// Seeded shuffle, then the first `round(fraction · len)` samples go left.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("split fraction {fraction} not in (0, 1)")));
        }
        let cut = (fraction * self.len() as f64).round() as usize;
        if cut == 0 || cut == self.len() {
            return Err(Error::InvalidArgument(format!("split of {} samples leaves one side empty", self.len())));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((self.subset(&order[..cut]), self.subset(&order[cut..])))
    }
}

/// Procedural pattern families. Carrier and host tasks use different
/// families so that the two tasks are unrelated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternFamily {
    /// One bar through the centre per class, at angle `π·c / classes`.
    Bars,
    /// Small shape per class: disk, ring, plus, corner dots, square, cross, pairs.
    Shapes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub family: PatternFamily,
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_std: f32,
    /// Maximum centre offset in pixels along each axis.
    pub jitter: i32,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(family: PatternFamily, classes: usize, per_class: usize, seed: u64) -> Self {
        Self { family, classes, per_class, channels: 1, height: 12, width: 12, noise_std: 0.1, jitter: 1, seed }
    }

    pub fn shape(&self) -> Shape3 {
        Shape3::new(self.channels, self.height, self.width)
    }
}

fn gauss(d2: f32, sigma: f32) -> f32 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn segment_distance(px: f32, py: f32, ax: f32, ay: f32, bx: f32, by: f32) -> f32 {
    let (vx, vy) = (bx - ax, by - ay);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { (((px - ax) * vx + (py - ay) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (ax + t * vx, ay + t * vy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Intensity in [0, 1] at offset `(dx, dy)` from the pattern centre.
fn pattern_value(family: PatternFamily, class: usize, classes: usize, dx: f32, dy: f32, extent: f32) -> f32 {
    match family {
        PatternFamily::Bars => {
            let theta = std::f32::consts::PI * class as f32 / classes as f32;
            let (s, c) = theta.sin_cos();
            let along = dx * c + dy * s;
            let across = -dx * s + dy * c;
            if along.abs() > extent {
                0.0
            } else {
                gauss(across * across, 0.6)
            }
        }
        PatternFamily::Shapes => {
            let size = extent * 0.7 * (1.0 + (class / 8) as f32 * 0.25);
            let r = (dx * dx + dy * dy).sqrt();
            let dot = |cx: f32, cy: f32| gauss((dx - cx).powi(2) + (dy - cy).powi(2), 0.8);
            match class % 8 {
                0 => (1.0 - (r - size * 0.55).max(0.0)).clamp(0.0, 1.0),
                1 => gauss((r - size).powi(2), 0.5),
                2 => {
                    let h = segment_distance(dx, dy, -size, 0.0, size, 0.0);
                    let v = segment_distance(dx, dy, 0.0, -size, 0.0, size);
                    gauss(h.min(v).powi(2), 0.5)
                }
                3 => [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]
                    .iter()
                    .map(|&(sx, sy)| dot(sx * size, sy * size))
                    .fold(0.0, f32::max),
                4 => {
                    let d = (dx.abs().max(dy.abs()) - size).abs();
                    gauss(d * d, 0.5)
                }
                5 => {
                    let a = segment_distance(dx, dy, -size, -size, size, size);
                    let b = segment_distance(dx, dy, -size, size, size, -size);
                    gauss(a.min(b).powi(2), 0.5)
                }
                6 => dot(-size, 0.0).max(dot(size, 0.0)),
                _ => dot(0.0, -size).max(dot(0.0, size)),
            }
        }
    }
}

/// Generates `per_class` samples for each class, labels in round-robin order.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    if cfg.channels == 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(Error::InvalidArgument("image extents must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0f32, cfg.noise_std.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let shape = cfg.shape();
    let extent = (cfg.height.min(cfg.width) as f32) / 2.0 - 0.5;
    let mut images = Vec::with_capacity(cfg.classes * cfg.per_class);
    let mut labels = Vec::with_capacity(cfg.classes * cfg.per_class);
    for _ in 0..cfg.per_class {
        for class in 0..cfg.classes {
            let jx = rng.random_range(-cfg.jitter..=cfg.jitter) as f32;
            let jy = rng.random_range(-cfg.jitter..=cfg.jitter) as f32;
            let gain: f32 = rng.random_range(0.7..1.0);
            let cx = (cfg.width as f32 - 1.0) / 2.0 + jx;
            let cy = (cfg.height as f32 - 1.0) / 2.0 + jy;
            let mut data = Vec::with_capacity(shape.len());
            for _ in 0..cfg.channels {
                for y in 0..cfg.height {
                    for x in 0..cfg.width {
                        let v =
                            gain * pattern_value(cfg.family, class, cfg.classes, x as f32 - cx, y as f32 - cy, extent);
                        data.push((v + noise.sample(&mut rng)).clamp(0.0, 1.0));
                    }
                }
            }
            images.push(Tensor::new(shape.dims(), data)?);
            labels.push(class);
        }
    }
    Dataset::new(images, labels, cfg.classes)
}

const IDX_U8: u8 = 0x08;

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32, FormatError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FormatError::Truncated { offset, needed: offset + 4 - bytes.len().min(offset + 4) })
}

/// Parses an unsigned-byte IDX header, returning the dimensions and the payload.
fn parse_idx<'a>(bytes: &'a [u8], allowed_dims: &[u8]) -> Result<(Vec<usize>, &'a [u8]), FormatError> {
    let magic = bytes.get(..4).ok_or_else(|| FormatError::Truncated { offset: 0, needed: 4 - bytes.len() })?;
    if magic[0] != 0 || magic[1] != 0 || magic[2] != IDX_U8 || !allowed_dims.contains(&magic[3]) {
        return Err(FormatError::BadMagic(magic.to_vec()));
    }
    let ndims = magic[3] as usize;
    let dims: Vec<usize> =
        (0..ndims).map(|d| read_be_u32(bytes, 4 + 4 * d).map(|v| v as usize)).collect::<Result<_, _>>()?;
    let header = 4 + 4 * ndims;
    let len: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < len {
        return Err(FormatError::Truncated { offset: header + payload.len(), needed: len - payload.len() });
    }
    if payload.len() > len {
        return Err(FormatError::Corrupt(format!("{} trailing bytes", payload.len() - len)));
    }
    Ok((dims, payload))
}

/// Decodes an IDX image file (`0x00000803`, or `0x00000804` with a channel
/// axis) and a label file (`0x00000801`). Pixels are scaled to [0, 1].
pub fn idx_from_bytes(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (idims, ipix) = parse_idx(images, &[3, 4])?;
    let (ldims, lbytes) = parse_idx(labels, &[1])?;
    if idims[0] != ldims[0] {
        return Err(Error::Format(FormatError::Corrupt(format!("{} images but {} labels", idims[0], ldims[0]))));
    }
    let shape = if idims.len() == 3 { vec![1, idims[1], idims[2]] } else { idims[1..].to_vec() };
    let per: usize = shape.iter().product();
    let tensors = ipix
        .chunks(per.max(1))
        .take(idims[0])
        .map(|c| Tensor::new(shape.clone(), c.iter().map(|&b| b as f32 / 255.0).collect()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = lbytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(tensors, labels, classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    idx_from_bytes(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Encodes a dataset as IDX, quantizing pixels to bytes.
pub fn idx_to_bytes(data: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if data.class_count() > 256 {
        return Err(Error::InvalidArgument("IDX labels are single bytes".into()));
    }
    let shape = data.sample_shape();
    let mut img = Vec::new();
    let dims: Vec<usize> = if shape.len() == 3 && shape[0] == 1 {
        img.extend_from_slice(&[0, 0, IDX_U8, 3]);
        vec![data.len(), shape[1], shape[2]]
    } else {
        img.extend_from_slice(&[0, 0, IDX_U8, 4]);
        std::iter::once(data.len()).chain(shape.iter().copied()).collect()
    };
    for d in dims {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for i in 0..data.len() {
        img.extend(data.image(i).data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    let mut lab = vec![0, 0, IDX_U8, 1];
    lab.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lab.extend(data.labels().iter().map(|&l| l as u8));
    Ok((img, lab))
}

pub fn save_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (img, lab) = idx_to_bytes(data)?;
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}
