//! Labelled image datasets: synthetic generators, IDX/CSV ingestion, and
//! crop-and-flip augmentation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Images `(N, C, H, W)` with values in `[0, 1]` and their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::InvalidDataset(format!("images must be (N,C,H,W), got {:?}", images.shape())));
        }
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(Error::CountMismatch { images: n, labels: labels.len() });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::LabelOutOfRange { index, label, classes: num_classes });
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidDataset(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset { images: self.images.gather_rows(idx), labels: idx.iter().map(|&i| self.labels[i]).collect(), num_classes: self.num_classes }
    }

    pub fn head(&self, n: usize) -> Dataset {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Fraction of the most common label.
    pub fn majority_fraction(&self) -> f64 {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        *counts.iter().max().unwrap_or(&0) as f64 / self.len().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Two classes: vertical bars versus a checkerboard, each with random
    /// contrast and brightness.
    BarsVsCheckers,
    /// Four classes: a Gaussian bump in one image quadrant.
    GaussianBlobs,
}

impl SyntheticKind {
    pub fn num_classes(self) -> usize {
        match self {
            SyntheticKind::BarsVsCheckers => 2,
            SyntheticKind::GaussianBlobs => 4,
        }
    }
}

/// Zero-mean ±1 template for the bars-vs-checkers classes: stripes or checks
/// with 4-pixel cells, placed so that a horizontal flip maps each pattern to
/// itself on sizes divisible by 8.
pub fn bars_template(class: usize, size: usize) -> Vec<f64> {
    let s = |v: usize| if ((v + CELL / 2) / CELL).is_multiple_of(2) { 1.0 } else { -1.0 };
    let mut t = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            t.push(if class == 0 { s(x) } else { s(x) * s(y) });
        }
    }
    t
}

/// Bar and checker cell width in pixels.
const CELL: usize = 4;

/// Generates `n` single-channel `size × size` images with balanced labels.
///
/// Pixels are `clamp(base + noise)` with `noise ~ N(0, noise_std²)`.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, size: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidDataset(format!("need at least 2 examples, got {n}")));
    }
    if size < 8 {
        return Err(Error::InvalidDataset(format!("image size must be at least 8, got {size}")));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::InvalidDataset(format!("noise_std must be a finite non-negative number, got {noise_std}")));
    }
    let classes = kind.num_classes();
    let mut rng = rng::rng(rng::sub_seed(seed, &[rng::stream::DATA]));
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);

    let plane = size * size;
    let mut data = Vec::with_capacity(n * plane);
    for &y in &labels {
        let clean: Vec<f64> = match kind {
            SyntheticKind::BarsVsCheckers => {
                let contrast = rng.gen_range(0.4..0.8);
                let brightness = rng.gen_range(0.4..0.6);
                bars_template(y, size).iter().map(|t| brightness + 0.5 * contrast * t).collect()
            }
            SyntheticKind::GaussianBlobs => {
                let half = size as f64 / 2.0;
                let (qx, qy) = ((y % 2) as f64, (y / 2) as f64);
                let cx = qx * half + half / 2.0 + rng.gen_range(-0.15..0.15) * half;
                let cy = qy * half + half / 2.0 + rng.gen_range(-0.15..0.15) * half;
                let width = rng.gen_range(0.15..0.25) * size as f64;
                let amp = rng.gen_range(0.6..0.9);
                (0..plane)
                    .map(|p| {
                        let (px, py) = ((p % size) as f64 + 0.5, (p / size) as f64 + 0.5);
                        let r2 = (px - cx).powi(2) + (py - cy).powi(2);
                        0.05 + amp * (-r2 / (2.0 * width * width)).exp()
                    })
                    .collect()
            }
        };
        for v in clean {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push((v + noise_std * noise).clamp(0.0, 1.0));
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, size, size], data)?, labels, classes)
}

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes"))).ok_or(Error::Truncated(what))
}

/// Parses IDX image bytes (magic `0x00000803`) into `(N, 1, rows, cols)` scaled by `1/255`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::IdxMagic { expected: IDX_IMAGE_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    let len = n.checked_mul(rows).and_then(|v| v.checked_mul(cols)).ok_or(Error::Truncated("idx images"))?;
    let pixels = bytes.get(16..16 + len).ok_or(Error::Truncated("idx images"))?;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::EmptyDataset);
    }
    Tensor::new(vec![n, 1, rows, cols], pixels.iter().map(|&p| f64::from(p) / 255.0).collect())
}

/// Parses IDX label bytes (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::IdxMagic { expected: IDX_LABEL_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4, "idx labels")? as usize;
    let labels = bytes.get(8..8 + n).ok_or(Error::Truncated("idx labels"))?;
    Ok(labels.iter().map(|&l| l as usize).collect())
}

/// Loads an IDX image/label pair. With `num_classes` given, labels at or
/// above it are rejected; otherwise the class count is `max label + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    idx_dataset(&fs::read(images_path)?, &fs::read(labels_path)?, num_classes)
}

pub fn idx_dataset(image_bytes: &[u8], label_bytes: &[u8], num_classes: Option<usize>) -> Result<Dataset> {
    let images = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::CountMismatch { images: images.shape()[0], labels: labels.len() });
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    Dataset::new(images, labels, classes)
}

/// Loads CSV rows `label,p0,p1,...` (header required) with pixels already in
/// `[0, 1]`. `shape` defaults to a single-channel square image.
pub fn load_csv(path: impl AsRef<Path>, shape: Option<[usize; 3]>, num_classes: Option<usize>) -> Result<Dataset> {
    parse_csv(&fs::read_to_string(path)?, shape, num_classes)
}

pub fn parse_csv(text: &str, shape: Option<[usize; 3]>, num_classes: Option<usize>) -> Result<Dataset> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or(Error::EmptyDataset)?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(Error::Csv(format!("header must start with \"label,p0,...\", got {header:?}")));
    }
    for (i, c) in cols[1..].iter().enumerate() {
        if *c != format!("p{i}") {
            return Err(Error::Csv(format!("column {} should be p{i}, got {c:?}", i + 1)));
        }
    }
    let npix = cols.len() - 1;
    let shape = match shape {
        Some(s) if s.iter().product::<usize>() == npix => s,
        Some(s) => return Err(Error::Csv(format!("shape {s:?} does not hold {npix} pixels"))),
        None => {
            let side = (npix as f64).sqrt().round() as usize;
            if side * side != npix {
                return Err(Error::Csv(format!("{npix} pixels is not a square image; pass a shape")));
            }
            [1, side, side]
        }
    };
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Csv(format!("row {} has {} fields, expected {}", row + 1, fields.len(), cols.len())));
        }
        let label = fields[0].parse::<usize>().map_err(|e| Error::Csv(format!("row {}: label: {e}", row + 1)))?;
        labels.push(label);
        for f in &fields[1..] {
            data.push(f.parse::<f64>().map_err(|e| Error::Csv(format!("row {}: {e}", row + 1)))?);
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?, labels, classes)
}

/// Padding used by [`augment`] before the random crop.
pub const CROP_PAD: usize = 2;

/// Mirrors an image left-to-right.
pub fn flip_horizontal(img: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                out[(c * h + y) * w + x] = img[(c * h + y) * w + (w - 1 - x)];
            }
        }
    }
    out
}

/// Reflect-pads by `pad` and crops the original size at offset `(dy, dx)`
/// into the padded image (`0..=2*pad` each).
pub fn reflect_crop(img: &[f64], channels: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if n == 1 {
            return 0;
        }
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        for y in 0..h {
            let sy = reflect(y as isize + dy as isize - pad as isize, h);
            for x in 0..w {
                let sx = reflect(x as isize + dx as isize - pad as isize, w);
                out[(c * h + y) * w + x] = img[(c * h + sy) * w + sx];
            }
        }
    }
    out
}

/// Per image: reflect-pad by [`CROP_PAD`], crop back at a random offset, then
/// flip horizontally with probability 0.5. Labels and order are unchanged.
pub fn augment(batch: &Tensor, seed: u64) -> Tensor {
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let per = c * h * w;
    let mut data = Vec::with_capacity(batch.numel());
    for i in 0..n {
        let mut rng = rng::rng(rng::sub_seed(seed, &[rng::stream::AUGMENT, i as u64]));
        let dy = rng.gen_range(0..=2 * CROP_PAD);
        let dx = rng.gen_range(0..=2 * CROP_PAD);
        let flip = rng.gen_bool(0.5);
        let img = &batch.data()[i * per..(i + 1) * per];
        let mut out = reflect_crop(img, c, h, w, CROP_PAD, dy, dx);
        if flip {
            out = flip_horizontal(&out, c, h, w);
        }
        data.extend(out);
    }
    Tensor::new(s.to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, px: &[u8]) -> Vec<u8> {
        let mut b = IDX_IMAGE_MAGIC.to_be_bytes().to_vec();
        for v in [n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(px);
        b
    }

    fn idx_labels(ls: &[u8]) -> Vec<u8> {
        let mut b = IDX_LABEL_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&(ls.len() as u32).to_be_bytes());
        b.extend_from_slice(ls);
        b
    }

    #[test]
    fn idx_scaling() {
        let d = idx_dataset(&idx_images(1, 2, 2, &[0, 255, 128, 64]), &idx_labels(&[1]), None).unwrap();
        assert_eq!(d.images.shape(), &[1, 1, 2, 2]);
        assert_eq!(d.images.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert_eq!(d.labels, vec![1]);
    }

    #[test]
    fn idx_count_mismatch() {
        let r = idx_dataset(&idx_images(10, 1, 1, &[0; 10]), &idx_labels(&[0; 9]), None);
        assert!(matches!(r, Err(Error::CountMismatch { images: 10, labels: 9 })));
    }

    #[test]
    fn idx_label_range() {
        let r = idx_dataset(&idx_images(2, 1, 1, &[0, 0]), &idx_labels(&[0, 3]), Some(3));
        assert!(matches!(r, Err(Error::LabelOutOfRange { index: 1, label: 3, classes: 3 })));
    }

    #[test]
    fn idx_wrong_magic_and_truncation() {
        let r = idx_dataset(&idx_labels(&[0]), &idx_labels(&[0]), None);
        assert!(matches!(r, Err(Error::IdxMagic { expected: IDX_IMAGE_MAGIC, .. })));
        let r = idx_dataset(&idx_images(2, 2, 2, &[0; 5]), &idx_labels(&[0, 1]), None);
        assert!(matches!(r, Err(Error::Truncated(_))));
        assert!(matches!(parse_idx_labels(&[0, 0]), Err(Error::Truncated(_))));
    }

    #[test]
    fn csv_parsing() {
        let d = parse_csv("label,p0,p1,p2,p3\n1,0,0.5,1,0.25\n0,1,1,1,1\n", None, None).unwrap();
        assert_eq!(d.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(d.labels, vec![1, 0]);
        assert!(parse_csv("y,p0\n1,0\n", None, None).is_err());
        assert!(parse_csv("label,p0\n1,2.0\n", Some([1, 1, 1]), None).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = gen_synthetic(SyntheticKind::BarsVsCheckers, 50, 16, 0.3, 4).unwrap();
        let b = gen_synthetic(SyntheticKind::BarsVsCheckers, 50, 16, 0.3, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.labels.iter().filter(|&&y| y == 0).count(), 25);
        let blobs = gen_synthetic(SyntheticKind::GaussianBlobs, 40, 12, 0.1, 4).unwrap();
        assert_eq!(blobs.num_classes, 4);
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        assert!(gen_synthetic(SyntheticKind::BarsVsCheckers, 1, 16, 0.0, 0).is_err());
        assert!(gen_synthetic(SyntheticKind::BarsVsCheckers, 10, 4, 0.0, 0).is_err());
        assert!(gen_synthetic(SyntheticKind::BarsVsCheckers, 10, 16, -1.0, 0).is_err());
    }

    #[test]
    fn noiseless_bars_are_linearly_separable() {
        // The template difference is a perfect linear probe.
        let d = gen_synthetic(SyntheticKind::BarsVsCheckers, 200, 16, 0.0, 11).unwrap();
        let probe: Vec<f64> = bars_template(0, 16).iter().zip(bars_template(1, 16)).map(|(a, b)| a - b).collect();
        for (i, &y) in d.labels.iter().enumerate() {
            let img = &d.images.data()[i * 256..(i + 1) * 256];
            let score: f64 = img.iter().zip(&probe).map(|(p, w)| p * w).sum();
            assert_eq!(if score > 0.0 { 0 } else { 1 }, y);
        }
    }

    #[test]
    fn constant_image_survives_augmentation() {
        let t = Tensor::full(&[3, 2, 8, 8], 0.37);
        assert_eq!(augment(&t, 99), t);
    }

    #[test]
    fn double_flip_is_identity() {
        let img: Vec<f64> = (0..2 * 3 * 5).map(|v| v as f64 / 30.0).collect();
        let once = flip_horizontal(&img, 2, 3, 5);
        assert_ne!(once, img);
        assert_eq!(flip_horizontal(&once, 2, 3, 5), img);
    }

    #[test]
    fn centred_crop_is_identity() {
        let img: Vec<f64> = (0..16).map(|v| v as f64 / 16.0).collect();
        assert_eq!(reflect_crop(&img, 1, 4, 4, 2, 2, 2), img);
    }

    #[test]
    fn augmentation_is_deterministic_and_bounded() {
        let d = gen_synthetic(SyntheticKind::BarsVsCheckers, 8, 16, 0.3, 1).unwrap();
        let a = augment(&d.images, 5);
        assert_eq!(a, augment(&d.images, 5));
        assert_ne!(a, augment(&d.images, 6));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
