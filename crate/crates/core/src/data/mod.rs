//! Datasets, minibatch sampling and pixel standardization.

mod cifar;
mod synthetic;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::seed;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub use cifar::{
    cifar_files, load_cifar10, parse_cifar_records, read_cifar_file, record_bytes, write_cifar_file,
    CIFAR_CLASSES, CIFAR_RECORD_BYTES, CIFAR_SIDE,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};

const SAMPLER_STREAM: u64 = 0x5a4d_504c;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub(crate) fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

/// Images with integer class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Parameter(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if let Some(first) = images.first() {
            let size = (first.width(), first.height());
            if let Some(i) = images.iter().position(|im| (im.width(), im.height()) != size) {
                return Err(Error::Dimension(format!(
                    "image {i} is {}×{}, expected {}×{}",
                    images[i].width(),
                    images[i].height(),
                    size.0,
                    size.1
                )));
            }
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Image side lengths `(width, height)`, if the dataset is non-empty.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.images.first().map(|im| (im.width(), im.height()))
    }

    /// The label-free view handed to the training loop.
    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            images: &self.images,
        }
    }

    /// The first `count` images of each class, in dataset order.
    pub fn per_class_subset(&self, count: usize) -> LabeledDataset {
        let mut taken = vec![0usize; self.num_classes];
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (im, &l) in self.images.iter().zip(&self.labels) {
            if taken[l] < count {
                taken[l] += 1;
                images.push(im.clone());
                labels.push(l);
            }
        }
        LabeledDataset {
            images,
            labels,
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

/// A dataset with its labels hidden.
#[derive(Clone, Copy, Debug)]
pub struct UnlabeledView<'a> {
    images: &'a [Image],
}

impl<'a> UnlabeledView<'a> {
    pub fn images(&self) -> &'a [Image] {
        self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, i: usize) -> &'a Image {
        &self.images[i]
    }
}

/// Index batches for one epoch: a seeded permutation cut into full batches.
pub fn batch_sampler(n_items: usize, batch_size: usize, epoch: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Parameter(format!("batch_size must be ≥ 2, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut seed::rng(seed, &[SAMPLER_STREAM, epoch as u64]));
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

/// Per-channel standardization of pixels scaled to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Normalizer {
    /// Channel statistics over every pixel of `images`. A constant channel gets std 1.
    pub fn fit(images: &[Image]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Parameter("cannot fit normalizer on no images".into()));
        }
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for im in images {
            for p in im.pixels().chunks_exact(3) {
                for c in 0..3 {
                    let v = p[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += im.width() * im.height();
        }
        let mut out = Normalizer::default();
        for c in 0..3 {
            let mean = sum[c] / count as f64;
            let var = (sq[c] / count as f64 - mean * mean).max(0.0);
            out.mean[c] = mean;
            out.std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(out)
    }

    /// Stacks images into an `n×3×h×w` tensor.
    pub fn to_tensor<'a, T: Scalar, I>(&self, images: I) -> Result<Tensor<T>>
    where
        I: IntoIterator<Item = &'a Image>,
    {
        let mut data = Vec::new();
        let mut size = None;
        let mut n = 0;
        for im in images {
            let s = (im.width(), im.height());
            if *size.get_or_insert(s) != s {
                return Err(Error::Dimension(format!(
                    "mixed image sizes in batch: {:?} vs {:?}",
                    size.unwrap(),
                    s
                )));
            }
            let hw = s.0 * s.1;
            let px = im.pixels();
            for c in 0..3 {
                let (m, sd) = (self.mean[c], self.std[c]);
                data.extend((0..hw).map(|i| T::from_f64_lossy((px[3 * i + c] as f64 / 255.0 - m) / sd)));
            }
            n += 1;
        }
        let (w, h) = size.ok_or_else(|| Error::Parameter("empty image batch".into()))?;
        Tensor::new(vec![n, 3, h, w], data)
    }
}
