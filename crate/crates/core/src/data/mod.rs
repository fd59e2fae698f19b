//! Dataset ingestion, augmentation and deterministic batching.

mod augment;
mod cifar;
mod loader;
mod mnist;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use augment::{augment, crop, hflip, AugmentFlags};
pub use cifar::{read_cifar10, read_cifar10_file, CIFAR_RECORD_BYTES, CIFAR_RECORDS_PER_FILE};
pub use loader::{epoch_order, Batches, Prefetch};
pub use mnist::{read_idx_images, read_idx_labels, read_mnist};
pub use synth::{synth_generate, SynthSpec};

use crate::backbones::InputShape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One step's worth of examples; both branches see exactly this batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `N×C×H×W`, normalized.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// `N×classes` one-hot rows.
    pub one_hot: Tensor,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = labels.len();
        if n == 0 || images.shape().first() != Some(&n) {
            return Err(Error::contract(format!(
                "batch of {n} labels for images of shape {:?}",
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!("label {bad} outside {classes} classes")));
        }
        let one_hot = Tensor::from_fn(vec![n, classes], |i| {
            if labels[i / classes] == i % classes {
                1.0
            } else {
                0.0
            }
        });
        Ok(Batch {
            images,
            labels,
            one_hot,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Images stored normalized and contiguous, `len × C × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: InputShape,
    pub classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: InputShape, classes: usize, pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = shape.channels * shape.height * shape.width;
        if pixels.len() != per * labels.len() {
            return Err(Error::contract(format!(
                "{} pixel values for {} images of {per}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset {
            shape,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.channels * self.shape.height * self.shape.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        let s = self.shape;
        let images = Tensor::new(vec![indices.len(), s.channels, s.height, s.width], pixels)?;
        Batch::new(images, indices.iter().map(|&i| self.labels[i]).collect(), self.classes)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// The first `n` examples (all of them if `n >= len`).
    pub fn truncate(mut self, n: usize) -> Self {
        if n < self.len() {
            self.labels.truncate(n);
            self.pixels.truncate(n * self.image_len());
        }
        self
    }
}

impl AsRef<Dataset> for Dataset {
    fn as_ref(&self) -> &Dataset {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Synthetic(SynthSpec),
    Cifar10,
    MnistIdx,
}

impl Source {
    pub fn name(&self) -> &'static str {
        match self {
            Source::Synthetic(_) => "synthetic",
            Source::Cifar10 => "cifar10-binary",
            Source::MnistIdx => "mnist-idx",
        }
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synthetic" => Ok(Source::Synthetic(SynthSpec::default())),
            "cifar10-binary" => Ok(Source::Cifar10),
            "mnist-idx" => Ok(Source::MnistIdx),
            other => Err(format!(
                "expected `synthetic`, `cifar10-binary` or `mnist-idx`, got `{other}`"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub source: Source,
    pub root: Option<PathBuf>,
    pub classes: usize,
    pub augment: AugmentFlags,
    pub seed: u64,
    /// Per-channel normalization applied to pixels scaled to `[0, 1]`
    /// (byte sources) or to raw values (synthetic).
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub train_limit: Option<usize>,
    pub eval_limit: Option<usize>,
}

impl DatasetSpec {
    pub fn input_shape(&self) -> InputShape {
        match &self.source {
            Source::Synthetic(s) => InputShape {
                channels: s.channels,
                height: s.size,
                width: s.size,
            },
            Source::Cifar10 => InputShape {
                channels: 3,
                height: 32,
                width: 32,
            },
            Source::MnistIdx => InputShape {
                channels: 1,
                height: 28,
                width: 28,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let channels = self.input_shape().channels;
        let expected_classes = match &self.source {
            Source::Synthetic(s) => {
                s.validate()?;
                None
            }
            Source::Cifar10 | Source::MnistIdx => Some(10),
        };
        if let Some(c) = expected_classes {
            if self.classes != c {
                return Err(Error::config(
                    "data.classes",
                    format!("{} has {c} classes, got {}", self.source.name(), self.classes),
                ));
            }
        }
        if self.classes < 2 {
            return Err(Error::config("data.classes", "need at least two classes"));
        }
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::config(
                "data.mean, data.std",
                format!("need one value per channel ({channels})"),
            ));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("data.std", "must be positive"));
        }
        if !matches!(self.source, Source::Synthetic(_)) && self.root.is_none() {
            return Err(Error::config(
                "data.root",
                format!("required for {} (or set VPL_DATA_ROOT)", self.source.name()),
            ));
        }
        Ok(())
    }

    pub fn load(&self, split: Split) -> Result<Dataset> {
        self.validate()?;
        let ds = match &self.source {
            Source::Synthetic(s) => {
                let mut ds = synth_generate(s, self.classes, self.seed, split)?;
                normalize(&mut ds.pixels, ds.shape, &self.mean, &self.std);
                ds
            }
            Source::Cifar10 => read_cifar10(self.root.as_ref().expect("validated"), split, &self.mean, &self.std)?,
            Source::MnistIdx => read_mnist(self.root.as_ref().expect("validated"), split, &self.mean, &self.std)?,
        };
        let limit = match split {
            Split::Train => self.train_limit,
            Split::Test => self.eval_limit,
        };
        Ok(match limit {
            Some(n) => ds.truncate(n),
            None => ds,
        })
    }
}

fn normalize(pixels: &mut [f32], shape: InputShape, mean: &[f32], std: &[f32]) {
    let plane = shape.height * shape.width;
    for (i, p) in pixels.iter_mut().enumerate() {
        let c = (i / plane) % shape.channels;
        *p = (*p - mean[c]) / std[c];
    }
}

/// Bytes to normalized floats, channel-planar `C×H×W` per image.
/// Keeps the offending path in the message of I/O errors.
pub(crate) fn with_path<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

pub(crate) fn bytes_to_pixels(bytes: &[u8], shape: InputShape, mean: &[f32], std: &[f32]) -> Vec<f32> {
    let mut pixels: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    normalize(&mut pixels, shape, mean, std);
    pixels
}
