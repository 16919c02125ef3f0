//! CIFAR-10 binary ingestion, augmentation, batching, and synthetic clusters.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LabelBatch;
use crate::tensor::{Float, Tensor};

pub const CHANNELS: usize = 3;
pub const CIFAR_SIZE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_PIXELS: usize = CHANNELS * CIFAR_SIZE * CIFAR_SIZE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";
/// Zero padding applied before random crops.
pub const CROP_PADDING: usize = 4;

/// Per-channel normalization `(x/255 − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }
}

/// In-memory image set. Images are normalized `3×s×s` planes stored back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<u8>,
    num_classes: usize,
    image_size: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<u8>, num_classes: usize, image_size: usize) -> Result<Self> {
        let per = CHANNELS * image_size * image_size;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Format(format!(
                "{} pixel values do not form {} images of {per}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Format(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            image_size,
        })
    }

    pub fn empty(num_classes: usize, image_size: usize) -> Self {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            num_classes,
            image_size,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn image_len(&self) -> usize {
        CHANNELS * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            image_size: self.image_size,
        }
    }

    /// First `len - tail` records and the last `tail` records.
    pub fn split_tail(&self, tail: usize) -> Result<(Dataset, Dataset)> {
        if tail > self.len() {
            return Err(Error::Config(format!("cannot hold out {tail} of {} records", self.len())));
        }
        let cut = self.len() - tail;
        let head: Vec<usize> = (0..cut).collect();
        let rest: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&head), self.subset(&rest)))
    }

    pub fn concat(mut self, other: &Dataset) -> Result<Dataset> {
        if other.image_size != self.image_size || other.num_classes != self.num_classes {
            return Err(Error::Format("cannot concatenate datasets of different geometry".into()));
        }
        self.images.extend_from_slice(&other.images);
        self.labels.extend_from_slice(&other.labels);
        Ok(self)
    }

    /// Indices ordered by label, stable within a class.
    pub fn class_sorted(&self, indices: &[usize]) -> Vec<usize> {
        let mut v = indices.to_vec();
        v.sort_by_key(|&i| self.labels[i]);
        v
    }

    /// Stack records into a `b×3×s×s` tensor, optionally augmenting each image.
    pub fn batch<T: Float>(&self, indices: &[usize], mut augment: Option<&mut ChaCha8Rng>) -> Result<(Tensor<T>, LabelBatch)> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Config(format!("record {i} out of range for {} records", self.len())));
            }
            match augment.as_deref_mut() {
                Some(rng) => data.extend(augment_with(self.image(i), s, rng).into_iter().map(T::from_f32)),
                None => data.extend(self.image(i).iter().map(|&v| T::from_f32(v))),
            }
        }
        let labels = indices.iter().map(|&i| self.label(i)).collect();
        Ok((
            Tensor::new(&[indices.len(), CHANNELS, s, s], data)?,
            LabelBatch::new(labels, self.num_classes)?,
        ))
    }
}

/// Decode CIFAR-10 binary records: one label byte then 3072 pixel bytes
/// (R, G, B planes, row-major).
pub fn parse_cifar_records(bytes: &[u8], norm: &Normalization) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(Error::Format(format!(
            "expected a multiple of {CIFAR_RECORD} bytes (e.g. {} for {} records), got {}",
            (whole + 1) * CIFAR_RECORD,
            whole + 1,
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let plane = CIFAR_SIZE * CIFAR_SIZE;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Format(format!("label byte {} is not a CIFAR-10 class", rec[0])));
        }
        labels.push(rec[0]);
        for (c, px) in rec[1..].chunks_exact(plane).enumerate() {
            let (m, s) = (norm.mean[c], norm.std[c]);
            images.extend(px.iter().map(|&p| ((p as f64 / 255.0 - m) / s) as f32));
        }
    }
    Dataset::new(images, labels, CIFAR_CLASSES, CIFAR_SIZE)
}

fn load_cifar_file(path: &Path, norm: &Normalization) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = CIFAR_RECORDS_PER_FILE * CIFAR_RECORD;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    parse_cifar_records(&bytes, norm)
}

/// Load the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path, norm: &Normalization) -> Result<(Dataset, Dataset)> {
    let mut train = Dataset::empty(CIFAR_CLASSES, CIFAR_SIZE);
    for name in CIFAR_TRAIN_FILES {
        train = train.concat(&load_cifar_file(&dir.join(name), norm)?)?;
    }
    let test = load_cifar_file(&dir.join(CIFAR_TEST_FILE), norm)?;
    Ok((train, test))
}

pub fn hflip(img: &mut [f32], size: usize) {
    for row in img.chunks_mut(size) {
        row.reverse();
    }
}

/// Zero-pad by [`CROP_PADDING`] and take the `size×size` window at `(dy, dx)`
/// of the padded image. `(4, 4)` returns the input.
pub fn pad_crop(img: &[f32], size: usize, dy: usize, dx: usize) -> Vec<f32> {
    let p = CROP_PADDING as isize;
    let mut out = vec![0.0; img.len()];
    for (src, dst) in img.chunks(size * size).zip(out.chunks_mut(size * size)) {
        for y in 0..size {
            let sy = y as isize + dy as isize - p;
            if sy < 0 || sy >= size as isize {
                continue;
            }
            for x in 0..size {
                let sx = x as isize + dx as isize - p;
                if sx >= 0 && sx < size as isize {
                    dst[y * size + x] = src[sy as usize * size + sx as usize];
                }
            }
        }
    }
    out
}

/// Horizontal flip with probability 1/2, then a random padded crop.
pub fn augment_with(img: &[f32], size: usize, rng: &mut impl Rng) -> Vec<f32> {
    let flip = rng.gen_bool(0.5);
    let dy = rng.gen_range(0..=2 * CROP_PADDING);
    let dx = rng.gen_range(0..=2 * CROP_PADDING);
    let mut out = pad_crop(img, size, dy, dx);
    if flip {
        hflip(&mut out, size);
    }
    out
}

pub fn augment(img: &[f32], size: usize, seed: u64) -> Vec<f32> {
    augment_with(img, size, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Seeded mini-batch order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

impl BatchPlan {
    /// Shuffled batches for `epoch`; identical for identical `(seed, epoch)`.
    pub fn batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
            .chunks(self.batch_size.max(1))
            .filter(|c| !self.drop_last || c.len() == self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Gaussian class prototypes: each class gets a random per-channel offset and a
/// coarse random pattern; records add i.i.d. noise of scale `spread`.
#[derive(Debug, Clone)]
pub struct SyntheticClusters {
    prototypes: Vec<Vec<f32>>,
    spread: f64,
    image_size: usize,
}

const PATTERN_GRID: usize = 4;

impl SyntheticClusters {
    pub fn new(num_classes: usize, spread: f64, seed: u64, image_size: usize) -> Result<Self> {
        if !(spread >= 0.0 && spread.is_finite()) {
            return Err(Error::Config(format!("spread must be finite and nonnegative, got {spread}")));
        }
        if num_classes == 0 || num_classes > u8::MAX as usize || image_size == 0 {
            return Err(Error::Config("synthetic data needs 1..=255 classes and a positive size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = image_size.div_ceil(PATTERN_GRID);
        let prototypes = (0..num_classes)
            .map(|_| {
                let mut img = Vec::with_capacity(CHANNELS * image_size * image_size);
                for _ in 0..CHANNELS {
                    let offset: f64 = StandardNormal.sample(&mut rng);
                    let grid: Vec<f64> = (0..PATTERN_GRID * PATTERN_GRID).map(|_| StandardNormal.sample(&mut rng)).collect();
                    for y in 0..image_size {
                        for x in 0..image_size {
                            let g = grid[(y / cell) * PATTERN_GRID + x / cell];
                            img.push((offset + 0.5 * g) as f32);
                        }
                    }
                }
                img
            })
            .collect();
        Ok(SyntheticClusters {
            prototypes,
            spread,
            image_size,
        })
    }

    /// `per_class` noisy copies of every prototype, grouped by class.
    pub fn sample(&self, per_class: usize, noise_seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (c, proto) in self.prototypes.iter().enumerate() {
            for _ in 0..per_class {
                images.extend(proto.iter().map(|&p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p + (self.spread * z) as f32
                }));
                labels.push(c as u8);
            }
        }
        Dataset {
            images,
            labels,
            num_classes: self.prototypes.len(),
            image_size: self.image_size,
        }
    }
}

/// 32×32 synthetic clusters; noise is seeded from `seed` as well.
pub fn synthetic_clusters(num_classes: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if spread <= 0.0 {
        return Err(Error::Config(format!("spread must be positive, got {spread}")));
    }
    Ok(SyntheticClusters::new(num_classes, spread, seed, CIFAR_SIZE)?.sample(per_class, seed.wrapping_add(1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..CIFAR_PIXELS).map(fill));
        r
    }

    #[test]
    fn parses_planes_in_rgb_order() {
        let mut bytes = record(3, |i| (i / 1024) as u8 * 100);
        bytes.extend(record(9, |_| 255));
        let norm = Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        };
        let ds = parse_cifar_records(&bytes, &norm).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[3, 9]);
        let img = ds.image(0);
        assert_eq!(img[0], 0.0);
        assert!((img[1024] - 100.0 / 255.0).abs() < 1e-7);
        assert!((img[2048] - 200.0 / 255.0).abs() < 1e-7);
        assert!(ds.image(1).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_malformed_bytes() {
        let err = parse_cifar_records(&vec![0u8; 3072], &Normalization::default()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("3072"), "{err}");
        let bad_label = record(10, |_| 0);
        assert!(matches!(parse_cifar_records(&bad_label, &Normalization::default()), Err(Error::Format(_))));
    }

    #[test]
    fn load_cifar10_checks_file_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let good: Vec<u8> = (0..CIFAR_RECORDS_PER_FILE).flat_map(|i| record((i % 10) as u8, |p| (p % 251) as u8)).collect();
        for name in CIFAR_TRAIN_FILES {
            fs::write(dir.path().join(name), &good).unwrap();
        }
        fs::write(dir.path().join(CIFAR_TEST_FILE), &good[..good.len() - 1]).unwrap();
        let err = load_cifar10(dir.path(), &Normalization::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("30730000") && msg.contains("30729999"), "{msg}");

        fs::write(dir.path().join(CIFAR_TEST_FILE), &good).unwrap();
        let (train, test) = load_cifar10(dir.path(), &Normalization::default()).unwrap();
        assert_eq!(train.len(), 50_000);
        assert_eq!(test.len(), 10_000);
        assert_eq!(train.class_histogram(), vec![5000; 10]);
    }

    #[test]
    fn flip_is_an_involution_and_center_crop_is_identity() {
        let img: Vec<f32> = (0..3 * 6 * 6).map(|i| i as f32).collect();
        let mut f = img.clone();
        hflip(&mut f, 6);
        assert_ne!(f, img);
        hflip(&mut f, 6);
        assert_eq!(f, img);
        assert_eq!(pad_crop(&img, 6, CROP_PADDING, CROP_PADDING), img);
        let shifted = pad_crop(&img, 6, CROP_PADDING + 1, CROP_PADDING);
        assert_eq!(shifted[0], img[6]);
        assert_eq!(&shifted[30..36], &[0.0; 6]);
    }

    #[test]
    fn augmentation_is_seeded() {
        let img: Vec<f32> = (0..3 * 32 * 32).map(|i| (i % 17) as f32).collect();
        assert_eq!(augment(&img, 32, 11), augment(&img, 32, 11));
        let differ = (0..20).any(|s| augment(&img, 32, s) != augment(&img, 32, 11));
        assert!(differ);
        assert_eq!(augment(&img, 32, 11).len(), img.len());
    }

    #[test]
    fn batches_cover_every_record_once() {
        let plan = BatchPlan {
            batch_size: 7,
            seed: 3,
            drop_last: false,
        };
        let batches = plan.batches(50, 2);
        assert_eq!(batches, plan.batches(50, 2));
        assert_ne!(batches, plan.batches(50, 3));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());

        let dropped = BatchPlan { drop_last: true, ..plan }.batches(50, 2);
        assert_eq!(dropped.len(), 7);
        assert!(dropped.iter().all(|b| b.len() == 7));
    }

    #[test]
    fn synthetic_layout_and_limits() {
        let ds = synthetic_clusters(2, 4, 0.3, 9).unwrap();
        assert_eq!(ds.len(), 8);
        assert_eq!(ds.labels(), &[0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(ds, synthetic_clusters(2, 4, 0.3, 9).unwrap());
        assert!(synthetic_clusters(2, 4, 0.0, 9).is_err());

        let exact = SyntheticClusters::new(3, 0.0, 4, 8).unwrap().sample(3, 1);
        for c in 0..3 {
            assert_eq!(exact.image(3 * c), exact.image(3 * c + 2));
        }
        assert_ne!(exact.image(0), exact.image(3));
    }

    #[test]
    fn batch_tensor_and_labels() {
        let ds = SyntheticClusters::new(3, 0.1, 4, 8).unwrap().sample(2, 1);
        let (x, y) = ds.batch::<f64>(&[5, 0], None).unwrap();
        assert_eq!(x.shape(), &[2, 3, 8, 8]);
        assert_eq!(y.labels(), &[2, 0]);
        assert_eq!(x.data()[0] as f32, ds.image(5)[0]);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (xa, ya) = ds.batch::<f32>(&[5, 0], Some(&mut rng)).unwrap();
        assert_eq!(xa.shape(), x.shape());
        assert_eq!(ya, y);
        assert!(ds.batch::<f32>(&[6], None).is_err());
    }
}
