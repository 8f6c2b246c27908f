use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_PIXELS: usize = CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
/// One label byte followed by the R, G and B planes.
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_FILE_BYTES: usize = CIFAR_RECORDS_PER_FILE * CIFAR_RECORD;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";
/// Zero padding added on each side before the random crop.
pub const AUGMENT_PAD: usize = 4;

/// Labelled images stored as bytes; batches are produced as `[0, 1]` floats
/// normalized by per-channel statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<usize>,
    num_classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    /// Per-channel mean of the `[0, 1]` values.
    pub channel_mean: Vec<f32>,
    /// Per-channel standard deviation of the `[0, 1]` values.
    pub channel_std: Vec<f32>,
}

impl Dataset {
    /// Builds a dataset from CHW byte images; normalization statistics are
    /// computed from these images.
    pub fn new(
        pixels: Vec<u8>,
        labels: Vec<usize>,
        num_classes: usize,
        shape: [usize; 3],
    ) -> Result<Self, TrainError> {
        let [channels, height, width] = shape;
        let per = channels * height * width;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(TrainError::Data(format!(
                "{} pixel bytes do not hold {} images of shape {shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(TrainError::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let mut data = Dataset {
            pixels,
            labels,
            num_classes,
            channels,
            height,
            width,
            channel_mean: vec![0.0; channels],
            channel_std: vec![1.0; channels],
        };
        let (mean, std) = data.compute_stats();
        data.channel_mean = mean;
        data.channel_std = std;
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `[channels, height, width]`.
    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` as `[0, 1]` floats in CHW order.
    pub fn image(&self, i: usize) -> Vec<f32> {
        self.image_bytes(i)
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect()
    }

    /// Per-channel mean and population standard deviation over all images.
    pub fn compute_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let plane = self.height * self.width;
        let mut sum = vec![0f64; self.channels];
        let mut sq = vec![0f64; self.channels];
        for img in self.pixels.chunks(self.image_len()) {
            for (c, chan) in img.chunks(plane).enumerate() {
                for &b in chan {
                    let v = b as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / count - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        (mean.into_iter().map(|m| m as f32).collect(), std)
    }

    /// Replaces the normalization statistics, e.g. with the training split's.
    pub fn with_stats(mut self, mean: Vec<f32>, std: Vec<f32>) -> Self {
        assert_eq!(mean.len(), self.channels);
        assert_eq!(std.len(), self.channels);
        self.channel_mean = mean;
        self.channel_std = std;
        self
    }

    /// The images at `indices`, keeping the current statistics.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image_bytes(i));
        }
        Dataset {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            pixels: Vec::new(),
            labels: Vec::new(),
            num_classes: self.num_classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
            channel_mean: self.channel_mean.clone(),
            channel_std: self.channel_std.clone(),
        }
    }

    /// Exactly `size / num_classes` randomly chosen images of every class,
    /// kept in their original order. Statistics are recomputed on the subset.
    pub fn stratified_subset(&self, size: usize, seed: u64) -> Result<Dataset, TrainError> {
        if size % self.num_classes != 0 {
            return Err(TrainError::Data(format!(
                "subset size {size} is not a multiple of {} classes",
                self.num_classes
            )));
        }
        let per_class = size / self.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = Vec::with_capacity(size);
        for class in 0..self.num_classes {
            let mut members: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] == class)
                .collect();
            if members.len() < per_class {
                return Err(TrainError::Data(format!(
                    "class {class} has {} images, {per_class} requested",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            chosen.extend_from_slice(&members[..per_class]);
        }
        chosen.sort_unstable();
        let subset = self.select(&chosen);
        let (mean, std) = subset.compute_stats();
        Ok(subset.with_stats(mean, std))
    }

    /// Normalized `(N, C, H, W)` batch of the given images. With an RNG, each
    /// image is randomly flipped and shifted first (see [`augment_image`]).
    pub fn batch(
        &self,
        indices: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Tensor<f32>, Vec<usize>) {
        let n = self.image_len();
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut rng = rng;
        for &i in indices {
            let mut img = self.image(i);
            if let Some(rng) = rng.as_deref_mut() {
                let aug = Augmentation::sample(rng);
                img = augment_image(&img, [self.channels, self.height, self.width], aug);
            }
            for (c, chan) in img.chunks_mut(plane).enumerate() {
                let (m, s) = (self.channel_mean[c], self.channel_std[c]);
                for v in chan {
                    *v = (*v - m) / s;
                }
            }
            data.extend_from_slice(&img);
        }
        let tensor = Tensor::new(
            vec![indices.len(), self.channels, self.height, self.width],
            data,
        )
        .expect("batch shape");
        (tensor, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Random flip and translation applied to one training image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: bool,
    /// Content moves down by `shift_y` and right by `shift_x`; both lie in
    /// `-AUGMENT_PAD..=AUGMENT_PAD`.
    pub shift_y: isize,
    pub shift_x: isize,
}

impl Augmentation {
    /// Flip with probability 1/2; a uniform crop of the image padded by
    /// [`AUGMENT_PAD`] zeros on each side.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let pad = AUGMENT_PAD as i64;
        Augmentation {
            flip: rng.random_bool(0.5),
            shift_y: rng.random_range(-pad..=pad) as isize,
            shift_x: rng.random_range(-pad..=pad) as isize,
        }
    }
}

/// Mirrors (columns reversed) and then translates a CHW image, filling
/// uncovered pixels with zeros.
pub fn augment_image(img: &[f32], shape: [usize; 3], aug: Augmentation) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize - aug.shift_y;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize - aug.shift_x;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let sx = if aug.flip {
                    w - 1 - sx as usize
                } else {
                    sx as usize
                };
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx];
            }
        }
    }
    out
}

/// Randomly augments every image of an `(N, C, H, W)` batch.
pub fn augment(batch: &Tensor<f32>, rng: &mut impl Rng) -> Tensor<f32> {
    let (n, c, h, w) = batch.dims4("augment").expect("NCHW batch");
    let per = c * h * w;
    let mut data = Vec::with_capacity(batch.len());
    for i in 0..n {
        let aug = Augmentation::sample(rng);
        data.extend(augment_image(
            &batch.data()[i * per..(i + 1) * per],
            [c, h, w],
            aug,
        ));
    }
    Tensor::new(batch.shape().to_vec(), data).expect("same shape")
}

fn parse_cifar_file(
    path: &Path,
    pixels: &mut Vec<u8>,
    labels: &mut Vec<usize>,
) -> Result<(), TrainError> {
    let bytes = fs::read(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() != CIFAR_FILE_BYTES {
        let complete = bytes.len() / CIFAR_RECORD;
        return Err(TrainError::Format {
            path: path.to_path_buf(),
            offset: (complete * CIFAR_RECORD).min(bytes.len()) as u64,
            message: format!(
                "expected {CIFAR_FILE_BYTES} bytes per batch file ({CIFAR_RECORDS_PER_FILE} records of \
                 {CIFAR_RECORD} bytes), found {}",
                bytes.len()
            ),
        });
    }
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(TrainError::Format {
                path: path.to_path_buf(),
                offset: (r * CIFAR_RECORD) as u64,
                message: format!("label byte {label} is not a CIFAR-10 class"),
            });
        }
        labels.push(label);
        pixels.extend_from_slice(&record[1..]);
    }
    Ok(())
}

fn load_files(dir: &Path, files: &[&str]) -> Result<Dataset, TrainError> {
    let mut pixels = Vec::with_capacity(files.len() * CIFAR_RECORDS_PER_FILE * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(files.len() * CIFAR_RECORDS_PER_FILE);
    for file in files {
        parse_cifar_file(&dir.join(file), &mut pixels, &mut labels)?;
    }
    Dataset::new(
        pixels,
        labels,
        CIFAR_CLASSES,
        [CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE],
    )
}

/// Reads the binary CIFAR-10 batches from `dir`. With `subset`, the training
/// split is reduced to a stratified sample of that size; the test split is
/// kept whole. The test split is normalized with the training statistics.
pub fn load_cifar10(
    dir: &Path,
    subset: Option<usize>,
    seed: u64,
) -> Result<(Dataset, Dataset), TrainError> {
    let mut train = load_files(dir, &CIFAR_TRAIN_FILES)?;
    if let Some(size) = subset {
        train = train.stratified_subset(size, seed)?;
    }
    let test = load_files(dir, &[CIFAR_TEST_FILE])?;
    let test = test.with_stats(train.channel_mean.clone(), train.channel_std.clone());
    Ok((train, test))
}
