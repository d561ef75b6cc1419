//! Datasets, loaders for the MNIST and CIFAR-10 binary layouts, a synthetic
//! generator, and the checkpoint and configuration file formats.

mod checkpoint;
mod cifar;
mod config_file;
mod mnist;
mod synth;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_dtype, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use cifar::{load_cifar10, load_cifar10_dir, parse_cifar10, CIFAR10_MEAN, CIFAR10_STD};
pub use config_file::ConfigFile;
pub use mnist::{load_mnist, load_mnist_dir, parse_mnist, MNIST_MEAN, MNIST_STD};
pub use synth::synth_dataset;

use crate::error::DataError;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

/// Per-channel standardization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Standardizes one channel-major image of raw bytes.
    pub(crate) fn apply_u8(&self, raw: &[u8], out: &mut Vec<f32>) {
        let plane = raw.len() / self.mean.len();
        for (c, chunk) in raw.chunks(plane).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            out.extend(chunk.iter().map(|&b| (b as f32 / 255.0 - m) / s));
        }
    }
}

/// Labelled images, channel-major, already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub split: Split,
    pub normalization: Normalization,
}

/// Seeded flip and padded-crop augmentation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub horizontal_flip: bool,
    /// Zero padding for random crops; 0 disables cropping.
    pub crop_padding: usize,
}

impl Augmentation {
    pub fn is_identity(&self) -> bool {
        !self.horizontal_flip && self.crop_padding == 0
    }

    /// Augments one `[C, H, W]` image in place.
    pub fn apply(&self, image: &mut [f32], channels: usize, height: usize, width: usize, rng: &mut impl Rng) {
        if self.horizontal_flip && rng.gen::<bool>() {
            for row in image.chunks_mut(width) {
                row.reverse();
            }
        }
        let pad = self.crop_padding;
        if pad > 0 {
            let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
            let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
            let src = image.to_vec();
            for c in 0..channels {
                for y in 0..height {
                    for x in 0..width {
                        let (sy, sx) = (y as isize + dy, x as isize + dx);
                        let inside = sy >= 0 && sx >= 0 && (sy as usize) < height && (sx as usize) < width;
                        image[(c * height + y) * width + x] =
                            if inside { src[(c * height + sy as usize) * width + sx as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        split: Split,
        normalization: Normalization,
    ) -> Result<Self, DataError> {
        let per = channels * height * width;
        if per == 0 || images.len() != labels.len() * per {
            return Err(DataError::Invalid(format!(
                "{} values for {} images of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Invalid(format!("label {bad} not in [0, {num_classes})")));
        }
        if normalization.mean.len() != channels || normalization.std.len() != channels {
            return Err(DataError::Invalid("normalization must have one entry per channel".into()));
        }
        Ok(Self { images, labels, channels, height, width, num_classes, split, normalization })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// The first `n` samples (all of them if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_meta()
        }
    }

    /// Samples `[from, to)`.
    pub fn range(&self, from: usize, to: usize) -> Dataset {
        let to = to.min(self.len());
        let from = from.min(to);
        Dataset {
            images: self.images[from * self.image_len()..to * self.image_len()].to_vec(),
            labels: self.labels[from..to].to_vec(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            split: self.split,
            normalization: self.normalization.clone(),
        }
    }

    /// Assembles the samples at `indices` into a `[B, C, H, W]` tensor.
    pub fn batch<T: Float>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        self.batch_augmented(indices, &Augmentation::default(), &mut rand::rngs::mock::StepRng::new(0, 0))
    }

    pub fn batch_augmented<T: Float>(
        &self,
        indices: &[usize],
        aug: &Augmentation,
        rng: &mut impl Rng,
    ) -> (Tensor<T>, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut scratch = vec![0f32; n];
        for &i in indices {
            let img = self.image(i);
            if aug.is_identity() {
                data.extend(img.iter().map(|&v| T::lit(v as f64)));
            } else {
                scratch.copy_from_slice(img);
                aug.apply(&mut scratch, self.channels, self.height, self.width, rng);
                data.extend(scratch.iter().map(|&v| T::lit(v as f64)));
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let tensor = Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)
            .expect("non-empty batch of consistent images");
        (tensor, labels)
    }
}

/// Reads a whole file, mapping failures to [`DataError::Io`].
pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|e| DataError::io(path, e))
}
