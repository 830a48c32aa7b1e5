//! Dataset containers shared by every stage: images, labels, sample identity
//! and seeding.

mod io;
mod synthetic;

pub use io::{load_dataset, save_dataset, save_labels, Dataset, DatasetMeta, StorageDtype};
pub use synthetic::{make_synthetic_shift_suite, DomainShift, ShiftSuite, SyntheticConfig};

use std::collections::HashSet;
use std::fmt;

use ndarray::{s, Array4, ArrayView3, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Seed for every random process in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent child seed for a named sub-stream (splitmix64 finalizer).
    pub fn derive(self, stream: u64) -> Seed {
        let mut z = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Seed(z ^ (z >> 31))
    }
}

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}

/// A batch of images with shape `(n, w, h, c)`, channel-last, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array4<f32>,
}

impl ImageTensor {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let shape = data.shape();
        if shape[1] == 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Shape(format!("image dims must be positive, got {shape:?}")));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite pixel value {v}")));
        }
        Ok(Self { data })
    }

    /// Builds a tensor, clipping every value into `[0, 1]`.
    pub fn from_clipped(mut data: Array4<f32>) -> Result<Self> {
        data.mapv_inplace(clip01);
        Self::new(data)
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(w, h, c)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn pixels_per_image(&self) -> usize {
        let [w, h, c] = self.image_shape();
        w * h * c
    }

    pub fn view(&self) -> ArrayView4<'_, f32> {
        self.data.view()
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), i)
    }

    pub fn as_array(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_array(self) -> Array4<f32> {
        self.data
    }

    pub fn select(&self, indices: &[usize]) -> ImageTensor {
        ImageTensor { data: self.data.select(Axis(0), indices) }
    }

    pub fn slice(&self, start: usize, end: usize) -> ImageTensor {
        ImageTensor { data: self.data.slice(s![start..end, .., .., ..]).to_owned() }
    }

    pub fn concat(parts: &[&ImageTensor]) -> Result<ImageTensor> {
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("cannot concatenate image batches: {e}")))?;
        Ok(ImageTensor { data })
    }

    /// Little-endian float32 bytes of image `i`, the content that sample digests cover.
    pub fn image_bytes(&self, i: usize) -> Vec<u8> {
        let img = self.image(i);
        let mut out = Vec::with_capacity(img.len() * 4);
        for v in img.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn content_digest(&self, i: usize) -> ContentDigest {
        ContentDigest(Sha256::digest(self.image_bytes(i)).into())
    }

    pub fn content_digests(&self) -> Vec<ContentDigest> {
        (0..self.len()).map(|i| self.content_digest(i)).collect()
    }

    /// Flattened `(n, w*h*c)` copy in row-major order.
    pub fn flatten(&self) -> ndarray::Array2<f32> {
        let n = self.len();
        let d = self.pixels_per_image();
        self.data.as_standard_layout().into_owned().into_shape_with_order((n, d)).expect("standard layout reshape")
    }
}

pub(crate) fn clip01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// SHA-256 of an image's float32 little-endian bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentDigest(pub [u8; 32]);

impl fmt::Debug for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentDigest({})", self)
    }
}

impl fmt::Display for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Stable identity of a sample: content digest plus its index in the owning dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleId {
    pub digest: ContentDigest,
    pub index: usize,
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.digest, self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: ImageTensor,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: ImageTensor, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        if labels.len() != images.len() {
            return Err(Error::Shape(format!("{} labels for {} images", labels.len(), images.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Splits into `[0, at)` and `[at, n)`.
    pub fn split_at(&self, at: usize) -> (LabeledDataset, LabeledDataset) {
        let at = at.min(self.len());
        let head: Vec<usize> = (0..at).collect();
        let tail: Vec<usize> = (at..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }

    /// Drops labels, keeping the images with fresh sample ids.
    pub fn unlabeled(&self) -> UnlabeledDataset {
        UnlabeledDataset::new(self.images.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDataset {
    pub images: ImageTensor,
    sample_ids: Vec<SampleId>,
}

impl UnlabeledDataset {
    pub fn new(images: ImageTensor) -> Self {
        let sample_ids = images
            .content_digests()
            .into_iter()
            .enumerate()
            .map(|(index, digest)| SampleId { digest, index })
            .collect();
        Self { images, sample_ids }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn sample_ids(&self) -> &[SampleId] {
        &self.sample_ids
    }

    pub fn digests(&self) -> HashSet<ContentDigest> {
        self.sample_ids.iter().map(|s| s.digest).collect()
    }
}
