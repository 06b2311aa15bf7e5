//! Synthetic three-class segmentation data and its on-disk format.
//!
//! Each sample is an `h × w` RGB image with a per-pixel label: `0` normal
//! background, `1` tumor (filled ellipses), `2` stroma (a ring around each
//! ellipse). Pixel colors are class means plus a per-image stain shift and
//! per-pixel Gaussian noise, clamped to `[0, 1]` and rounded to `f32`.
//!
//! File layout (little-endian):
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `FDSD`               |
//! | 4      | 2    | version (1)                |
//! | 6      | 2    | reserved, must be 0        |
//! | 8      | 4    | n                          |
//! | 12     | 2    | h                          |
//! | 14     | 2    | w                          |
//! | 16     | 12·n·h·w | images, f32, `[n][h][w][3]` |
//! | ...    | n·h·w | masks, u8, `[n][h][w]`    |

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LearnError, NUM_CLASSES};
use crate::seed;

pub const CLASS_NORMAL: u8 = 0;
pub const CLASS_TUMOR: u8 = 1;
pub const CLASS_STROMA: u8 = 2;

const CLASS_MEANS: [[f64; 3]; 3] = [
    [0.88, 0.78, 0.84],
    [0.38, 0.22, 0.55],
    [0.80, 0.47, 0.63],
];
const PIXEL_NOISE: f64 = 0.12;
const STAIN_JITTER: f64 = 0.03;
const STROMA_RING: f64 = 1.45;

pub const FILE_MAGIC: [u8; 4] = *b"FDSD";
pub const FILE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct SegDataset {
    n: usize,
    h: usize,
    w: usize,
    /// `[n][h][w][3]`. Generated and decoded images are exactly
    /// representable as `f32`; `to_bytes` rounds anything else.
    images: Vec<f64>,
    /// `[n][h][w]`.
    masks: Vec<u8>,
    seed: Option<u64>,
}

impl SegDataset {
    /// Wraps caller-supplied images (`[n][h][w][3]` in `[0, 1]`) and masks.
    pub fn from_parts(h: usize, w: usize, images: Vec<f64>, masks: Vec<u8>) -> Result<Self, LearnError> {
        let px = h * w;
        if px == 0 || masks.is_empty() || !masks.len().is_multiple_of(px) || images.len() != masks.len() * 3 {
            return Err(LearnError::ShapeMismatch(format!(
                "{} image values and {} labels do not form {h}x{w} samples",
                images.len(),
                masks.len()
            )));
        }
        if let Some(v) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LearnError::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        if let Some(&c) = masks.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(LearnError::LabelOutOfRange(c));
        }
        Ok(Self {
            n: masks.len() / px,
            h,
            w,
            images,
            masks,
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let s = self.pixels() * 3;
        &self.images[i * s..(i + 1) * s]
    }

    pub fn mask(&self, i: usize) -> &[u8] {
        let s = self.pixels();
        &self.masks[i * s..(i + 1) * s]
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        Sample {
            image: self.image(i),
            mask: self.mask(i),
        }
    }

    pub fn class_fraction(&self, i: usize, class: u8) -> f64 {
        let m = self.mask(i);
        m.iter().filter(|&&c| c == class).count() as f64 / m.len() as f64
    }

    /// Pixel counts per class over the whole dataset.
    pub fn class_counts(&self) -> [u64; NUM_CLASSES] {
        let mut counts = [0u64; NUM_CLASSES];
        for &c in &self.masks {
            counts[c as usize] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.images.len() * 4 + self.masks.len());
        out.extend_from_slice(&FILE_MAGIC);
        out.extend_from_slice(&FILE_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.h as u16).to_le_bytes());
        out.extend_from_slice(&(self.w as u16).to_le_bytes());
        for &v in &self.images {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&self.masks);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetDecodeError> {
        decode_dataset(bytes)
    }
}

/// One image and its mask, borrowed from a dataset or built by hand.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub image: &'a [f64],
    pub mask: &'a [u8],
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetDecodeError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u16),
    #[error("reserved header field is {0}, expected 0")]
    Reserved(u16),
    #[error("empty dimensions n={n} h={h} w={w}")]
    EmptyDimensions { n: usize, h: usize, w: usize },
    #[error("truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("pixel {index} is {value}, outside [0, 1]")]
    PixelOutOfRange { index: usize, value: f32 },
    #[error("mask label {label} at {index} out of range")]
    LabelOutOfRange { index: usize, label: u8 },
}

pub fn decode_dataset(bytes: &[u8]) -> Result<SegDataset, DatasetDecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DatasetDecodeError::Truncated {
            needed: HEADER_LEN,
            have: bytes.len(),
        });
    }
    if bytes[0..4] != FILE_MAGIC {
        return Err(DatasetDecodeError::BadMagic);
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != FILE_VERSION {
        return Err(DatasetDecodeError::UnsupportedVersion(version));
    }
    let reserved = u16_at(6);
    if reserved != 0 {
        return Err(DatasetDecodeError::Reserved(reserved));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u16_at(12) as usize;
    let w = u16_at(14) as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(DatasetDecodeError::EmptyDimensions { n, h, w });
    }
    // n < 2^32 and h·w < 2^32, so this cannot overflow a u128; check before
    // allocating anything.
    let px = n as u128 * h as u128 * w as u128;
    let needed = HEADER_LEN as u128 + px * 13;
    if (bytes.len() as u128) < needed {
        return Err(DatasetDecodeError::Truncated {
            needed: usize::try_from(needed).unwrap_or(usize::MAX),
            have: bytes.len(),
        });
    }
    let needed = needed as usize;
    if bytes.len() > needed {
        return Err(DatasetDecodeError::TrailingBytes(bytes.len() - needed));
    }
    let px = px as usize;
    let img_bytes = &bytes[HEADER_LEN..HEADER_LEN + px * 12];
    let mut images = Vec::with_capacity(px * 3);
    for (index, chunk) in img_bytes.chunks_exact(4).enumerate() {
        let value = f32::from_le_bytes(chunk.try_into().unwrap());
        if !(0.0..=1.0).contains(&value) {
            return Err(DatasetDecodeError::PixelOutOfRange { index, value });
        }
        images.push(f64::from(value));
    }
    let masks = bytes[HEADER_LEN + px * 12..].to_vec();
    if let Some(index) = masks.iter().position(|&c| c as usize >= NUM_CLASSES) {
        return Err(DatasetDecodeError::LabelOutOfRange {
            index,
            label: masks[index],
        });
    }
    Ok(SegDataset {
        n,
        h,
        w,
        images,
        masks,
        seed: None,
    })
}

struct Blob {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Blob {
    fn radius(&self, y: f64, x: f64) -> f64 {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

/// Generates `n` samples of size `h × w`. Deterministic in `seed`.
pub fn gen_dataset(n: usize, h: usize, w: usize, seed: u64) -> Result<SegDataset, LearnError> {
    if n == 0 {
        return Err(LearnError::InvalidArgument("n must be >= 1".into()));
    }
    if h < 8 || w < 8 || h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(LearnError::InvalidArgument(format!(
            "image size {h}x{w} must be at least 8x8"
        )));
    }
    let mut rng = seed::derived_stream(seed, seed::Role::Dataset, 0, 0);
    let px = h * w;
    let mut images = Vec::with_capacity(n * px * 3);
    let mut masks = Vec::with_capacity(n * px);
    let (hf, wf) = (h as f64, w as f64);
    let side = hf.min(wf);
    for _ in 0..n {
        let blobs: Vec<Blob> = (0..1 + (rng.next_u32_mod(3)))
            .map(|_| {
                let angle = std::f64::consts::PI * seed::uniform(&mut rng);
                Blob {
                    cy: hf * (0.15 + 0.7 * seed::uniform(&mut rng)),
                    cx: wf * (0.15 + 0.7 * seed::uniform(&mut rng)),
                    a: side * (0.10 + 0.15 * seed::uniform(&mut rng)),
                    b: side * (0.10 + 0.15 * seed::uniform(&mut rng)),
                    cos: angle.cos(),
                    sin: angle.sin(),
                }
            })
            .collect();
        let stain: Vec<f64> = seed::standard_normals(&mut rng, 3)
            .into_iter()
            .map(|z| z * STAIN_JITTER)
            .collect();
        let noise = seed::standard_normals(&mut rng, px * 3);
        for y in 0..h {
            for x in 0..w {
                let (py, px_) = (y as f64 + 0.5, x as f64 + 0.5);
                let r = blobs
                    .iter()
                    .map(|b| b.radius(py, px_))
                    .fold(f64::INFINITY, f64::min);
                let class = if r < 1.0 {
                    CLASS_TUMOR
                } else if r < STROMA_RING {
                    CLASS_STROMA
                } else {
                    CLASS_NORMAL
                };
                masks.push(class);
                let p = y * w + x;
                for c in 0..3 {
                    let v = CLASS_MEANS[class as usize][c] + stain[c] + PIXEL_NOISE * noise[p * 3 + c];
                    images.push(f64::from(v.clamp(0.0, 1.0) as f32));
                }
            }
        }
    }
    Ok(SegDataset {
        n,
        h,
        w,
        images,
        masks,
        seed: Some(seed),
    })
}

trait NextMod {
    fn next_u32_mod(&mut self, m: u32) -> u32;
}

impl NextMod for seed::Stream {
    fn next_u32_mod(&mut self, m: u32) -> u32 {
        (seed::uniform(self) * f64::from(m)) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum PartitionMode {
    Iid,
    /// Shards ordered by tumor fraction; the max/min ratio of shard tumor
    /// fractions must reach `factor`.
    LabelSkew { factor: f64 },
}

/// Splits the whole dataset into `k` disjoint shards.
pub fn partition(
    ds: &SegDataset,
    k: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<Vec<Vec<usize>>, LearnError> {
    let all: Vec<usize> = (0..ds.len()).collect();
    partition_indices(ds, &all, k, mode, seed)
}

/// Splits `indices` into `k` disjoint shards whose sizes differ by at most one.
pub fn partition_indices(
    ds: &SegDataset,
    indices: &[usize],
    k: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<Vec<Vec<usize>>, LearnError> {
    if k == 0 || k > indices.len() {
        return Err(LearnError::InvalidArgument(format!(
            "cannot split {} samples into {k} shards",
            indices.len()
        )));
    }
    let mut order = indices.to_vec();
    match mode {
        PartitionMode::Iid => {
            order.shuffle(&mut seed::derived_stream(seed, seed::Role::Partition, 0, 0));
        }
        PartitionMode::LabelSkew { factor } => {
            if factor.is_nan() || factor < 1.0 {
                return Err(LearnError::InvalidArgument(format!(
                    "skew factor must be >= 1, got {factor}"
                )));
            }
            let frac: Vec<(usize, f64)> = order
                .iter()
                .map(|&i| (i, ds.class_fraction(i, CLASS_TUMOR)))
                .collect();
            let mut frac = frac;
            frac.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            order = frac.into_iter().map(|(i, _)| i).collect();
        }
    }
    let base = order.len() / k;
    let extra = order.len() % k;
    let mut shards = Vec::with_capacity(k);
    let mut start = 0;
    for s in 0..k {
        let size = base + usize::from(s < extra);
        shards.push(order[start..start + size].to_vec());
        start += size;
    }
    if let PartitionMode::LabelSkew { factor } = mode {
        let ratio = skew_ratio(ds, &shards);
        if ratio < factor {
            return Err(LearnError::InvalidArgument(format!(
                "label skew reached only {ratio:.3}x, below requested {factor}x"
            )));
        }
    }
    Ok(shards)
}

/// Max over min of per-shard tumor-pixel fractions.
pub fn skew_ratio(ds: &SegDataset, shards: &[Vec<usize>]) -> f64 {
    let fractions: Vec<f64> = shards
        .iter()
        .map(|s| s.iter().map(|&i| ds.class_fraction(i, CLASS_TUMOR)).sum::<f64>() / s.len() as f64)
        .collect();
    let max = fractions.iter().copied().fold(f64::MIN, f64::max);
    let min = fractions.iter().copied().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Deterministic train/test split: shuffles with `seed` and keeps the first
/// `round(train_fraction·n)` samples (at least one on each side) for training.
pub fn train_test_split(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::derived_stream(seed, seed::Role::Split, 0, 0));
    let cut = if n < 2 {
        n
    } else {
        ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1)
    };
    let test = order.split_off(cut);
    (order, test)
}
