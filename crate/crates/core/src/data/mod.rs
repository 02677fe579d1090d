//! Labelled image collections: synthetic shapes and IDX files.

mod idx;
mod shapes;

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxImages};
pub use shapes::{generate_shapes, SHAPE_NAMES};

use crate::numerics::{Real, Tensor};
use crate::Error;

/// Square images `[n, S, S, C]` with values in `[0, 1]` and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    side: usize,
    channels: usize,
    /// `[n, S, S, C]` row-major.
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>) -> Result<Self, Error> {
        let &[n, h, w, _] = images.shape() else {
            return Err(Error::Config(format!("images must be [n, S, S, C], got {:?}", images.shape())));
        };
        if h != w {
            return Err(Error::Config(format!("images must be square, got {h}x{w}")));
        }
        if n != labels.len() {
            return Err(Error::CountMismatch { images: n, labels: labels.len() });
        }
        Ok(Self {
            side: h,
            channels: images.shape()[3],
            pixels: images.into_data(),
            labels,
        })
    }

    /// A dataset with no samples.
    pub fn empty(side: usize, channels: usize) -> Self {
        Self {
            side,
            channels,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// All pixels, `[n, S, S, C]` row-major.
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn pixels_per_image(&self) -> usize {
        self.side() * self.side() * self.channels()
    }

    /// Pixels of sample `i`, `[S, S, C]` row-major.
    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.pixels_per_image();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Gathers the given samples into a `[B, S, S, C]` batch.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>), Error> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut data = Vec::with_capacity(indices.len() * self.pixels_per_image());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Invalid(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend(self.image(i).iter().map(|&v| T::of(f64::from(v))));
            labels.push(self.labels[i]);
        }
        let tensor = Tensor::new(vec![indices.len(), self.side(), self.side(), self.channels()], data)?;
        Ok((tensor, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self, Error> {
        if indices.is_empty() {
            return Ok(Self::empty(self.side, self.channels));
        }
        let (images, labels) = self.batch::<f32>(indices)?;
        Self::new(images, labels)
    }

    /// Same images with different labels.
    pub fn relabel(&self, labels: Vec<usize>) -> Result<Self, Error> {
        if labels.len() != self.len() {
            return Err(Error::CountMismatch { images: self.len(), labels: labels.len() });
        }
        Ok(Self { labels, ..self.clone() })
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self), Error> {
        if n == 0 || n >= self.len() {
            return Err(Error::Config(format!("cannot split {} samples at {n}", self.len())));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    /// Count of samples per class, for classes `0..k`.
    pub fn class_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        for &l in &self.labels {
            if l < k {
                counts[l] += 1;
            }
        }
        counts
    }
}
