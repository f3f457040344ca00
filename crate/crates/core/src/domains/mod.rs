//! Labeled image domains: the dataset type, the parity trigger patch, the
//! procedural glyph domain pair, archive loaders and on-disk storage.

mod ingest;
mod patch;
mod store;
mod synthetic;

pub use ingest::{ingest_dataset, replicate_and_pad};
pub use patch::{apply_patch, PatchSpec};
pub use store::{load_dataset, load_manifest, save_dataset, DatasetManifest};
pub use synthetic::{make_synthetic_domain_pair, SyntheticShiftSpec, SyntheticSizes, Texture, Tint};

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest allowed ratio between the most and least frequent class.
pub const BALANCE_LIMIT: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Network input shape `(C, H, W)`.
    pub fn chw(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Which `(dis, dir)` augmentation cell each generated sample came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub cells: Vec<(f64, usize)>,
    pub sample_cells: Vec<usize>,
}

/// Labeled images from one domain. Pixels are stored as `u8` in `H×W×C`
/// order; [`DomainDataset::batch`] converts to normalized `f64` network input.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub shape: ImageShape,
    pub num_classes: usize,
    /// Nuisance tag; 0 is the source domain.
    pub domain_tag: u8,
    images: Vec<u8>,
    labels: Vec<usize>,
    pub provenance: Option<Provenance>,
}

impl DomainDataset {
    pub fn new(
        name: impl Into<String>,
        shape: ImageShape,
        num_classes: usize,
        domain_tag: u8,
        images: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if images.len() != labels.len() * shape.pixels() {
            return Err(Error::DimensionMismatch(format!(
                "{} pixel values for {} images of {:?}",
                images.len(),
                labels.len(),
                shape
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(DomainDataset {
            name: name.into(),
            shape,
            num_classes,
            domain_tag,
            images,
            labels,
            provenance: None,
        })
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

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.shape.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    pub(crate) fn images_mut(&mut self) -> &mut [u8] {
        &mut self.images
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Checks the largest/smallest class ratio against [`BALANCE_LIMIT`].
    pub fn check_balance(&self) -> Result<()> {
        let counts = self.class_counts();
        let max = counts.iter().copied().max().unwrap_or(0) as f64;
        let min = counts.iter().copied().min().unwrap_or(0) as f64;
        let ratio = if min == 0.0 { f64::INFINITY } else { max / min };
        if ratio > BALANCE_LIMIT {
            return Err(Error::UnbalancedClasses {
                ratio,
                limit: BALANCE_LIMIT,
            });
        }
        Ok(())
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_tag(mut self, tag: u8) -> Self {
        self.domain_tag = tag;
        self
    }

    pub fn subset(&self, indices: &[usize]) -> DomainDataset {
        let p = self.shape.pixels();
        let mut images = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        let provenance = self.provenance.as_ref().map(|prov| Provenance {
            cells: prov.cells.clone(),
            sample_cells: indices.iter().map(|&i| prov.sample_cells[i]).collect(),
        });
        DomainDataset {
            name: self.name.clone(),
            shape: self.shape,
            num_classes: self.num_classes,
            domain_tag: self.domain_tag,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance,
        }
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (DomainDataset, DomainDataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// A class-stratified random subset holding `fraction` of every class.
    pub fn stratified_fraction(&self, fraction: f64, seed: u64) -> DomainDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = Vec::new();
        for class in 0..self.num_classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            members.shuffle(&mut rng);
            let take = ((members.len() as f64) * fraction).round() as usize;
            picked.extend_from_slice(&members[..take.min(members.len())]);
        }
        picked.sort_unstable();
        self.subset(&picked)
    }

    /// Concatenates datasets with identical geometry and class count.
    pub fn concat(name: impl Into<String>, parts: &[&DomainDataset], tag: u8) -> Result<DomainDataset> {
        let first = parts.first().ok_or(Error::EmptyInput("no datasets to concatenate"))?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for part in parts {
            ensure_compatible(first, part)?;
            images.extend_from_slice(&part.images);
            labels.extend_from_slice(&part.labels);
        }
        DomainDataset::new(name, first.shape, first.num_classes, tag, images, labels)
    }

    /// Network input for the given samples: `(n, C, H, W)` with values `2·(p/255) − 1`.
    pub fn batch(&self, indices: &[usize]) -> ArrayD<f64> {
        let ImageShape {
            height,
            width,
            channels,
        } = self.shape;
        let plane = height * width;
        let mut data = vec![0.0; indices.len() * self.shape.pixels()];
        for (b, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            let out = &mut data[b * self.shape.pixels()..(b + 1) * self.shape.pixels()];
            for (pix, px) in img.chunks_exact(channels).enumerate() {
                for (c, &v) in px.iter().enumerate() {
                    out[c * plane + pix] = to_unit_signed(v);
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[indices.len(), channels, height, width]), data).expect("batch shape")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Pixel values in `[0, 1]`, `H×W×C` order.
    pub fn image_unit(&self, i: usize) -> Vec<f64> {
        self.image(i).iter().map(|&v| f64::from(v) / 255.0).collect()
    }

    /// Builds a dataset from `(n, C, H, W)` values in `[−1, 1]`, rounding back to `u8`.
    pub fn from_signed_batch(
        name: impl Into<String>,
        batch: &ArrayD<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        tag: u8,
    ) -> Result<DomainDataset> {
        let &[n, channels, height, width] = batch.shape() else {
            return Err(Error::DimensionMismatch(format!("expected (n,C,H,W), got {:?}", batch.shape())));
        };
        let shape = ImageShape {
            height,
            width,
            channels,
        };
        let mut images = vec![0u8; n * shape.pixels()];
        for b in 0..n {
            for c in 0..channels {
                for y in 0..height {
                    for x in 0..width {
                        images[b * shape.pixels() + (y * width + x) * channels + c] =
                            from_unit_signed(batch[[b, c, y, x]]);
                    }
                }
            }
        }
        DomainDataset::new(name, shape, num_classes, tag, images, labels)
    }
}

pub fn to_unit_signed(v: u8) -> f64 {
    f64::from(v) / 127.5 - 1.0
}

pub fn from_unit_signed(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn ensure_compatible(a: &DomainDataset, b: &DomainDataset) -> Result<()> {
    if a.num_classes != b.num_classes {
        return Err(Error::IncompatibleDomains(format!(
            "{} has {} classes, {} has {}",
            a.name, a.num_classes, b.name, b.num_classes
        )));
    }
    if a.shape != b.shape {
        return Err(Error::IncompatibleDomains(format!(
            "{} has geometry {:?}, {} has {:?}",
            a.name, a.shape, b.name, b.shape
        )));
    }
    Ok(())
}
