//! Dataset directories: `images.bin` (raw `u8`, `N×H×W×C`), `labels.bin`
//! (one `u8` per sample) and a `manifest.toml` describing them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DomainDataset, ImageShape, PatchSpec, Provenance, SyntheticShiftSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub count: usize,
    pub class_counts: Vec<usize>,
    pub shape: ImageShape,
    pub domain_tag: u8,
    pub images_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<SyntheticShiftSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<PatchSpec>,
    /// `(dis, dir)` per augmentation cell.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<(f64, usize)>,
    /// Cell index per sample, aligned with `labels.bin`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sample_cells: Vec<usize>,
}

impl DatasetManifest {
    pub fn describe(dataset: &DomainDataset) -> Self {
        let (cells, sample_cells) = dataset
            .provenance
            .as_ref()
            .map(|p| (p.cells.clone(), p.sample_cells.clone()))
            .unwrap_or_default();
        DatasetManifest {
            name: dataset.name.clone(),
            num_classes: dataset.num_classes,
            count: dataset.len(),
            class_counts: dataset.class_counts(),
            shape: dataset.shape,
            domain_tag: dataset.domain_tag,
            images_sha256: hex::encode(Sha256::digest(dataset.images())),
            seed: None,
            shift: None,
            patch: None,
            cells,
            sample_cells,
        }
    }
}

/// Writes `dataset` into `dir` (created if needed) with an optional enriched manifest.
pub fn save_dataset(dataset: &DomainDataset, dir: &Path, manifest: Option<DatasetManifest>) -> Result<()> {
    if dataset.num_classes > 256 {
        return Err(Error::format("dataset", "labels.bin stores one byte per label"));
    }
    fs::create_dir_all(dir)?;
    let manifest = manifest.unwrap_or_else(|| DatasetManifest::describe(dataset));
    fs::write(dir.join("images.bin"), dataset.images())?;
    let labels: Vec<u8> = dataset.labels().iter().map(|&l| l as u8).collect();
    fs::write(dir.join("labels.bin"), labels)?;
    let text = toml::to_string(&manifest).map_err(|e| Error::format("manifest", e.to_string()))?;
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.toml");
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    toml::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::format("manifest", e.to_string()))
}

pub fn load_dataset(dir: &Path) -> Result<DomainDataset> {
    let manifest = load_manifest(dir)?;
    let read = |file: &str| -> Result<Vec<u8>> {
        let path = dir.join(file);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        Ok(fs::read(path)?)
    };
    let images = read("images.bin")?;
    let found = hex::encode(Sha256::digest(&images));
    if found != manifest.images_sha256 {
        return Err(Error::ChecksumMismatch {
            path: dir.join("images.bin"),
            expected: manifest.images_sha256,
            found,
        });
    }
    let labels: Vec<usize> = read("labels.bin")?.into_iter().map(usize::from).collect();
    if labels.len() != manifest.count {
        return Err(Error::format(
            "dataset",
            format!("manifest says {} samples, labels.bin has {}", manifest.count, labels.len()),
        ));
    }
    let mut ds = DomainDataset::new(
        manifest.name,
        manifest.shape,
        manifest.num_classes,
        manifest.domain_tag,
        images,
        labels,
    )?;
    if !manifest.cells.is_empty() {
        ds.provenance = Some(Provenance {
            cells: manifest.cells,
            sample_cells: manifest.sample_cells,
        });
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{make_synthetic_domain_pair, SyntheticSizes};

    #[test]
    fn directory_round_trip() {
        let sizes = SyntheticSizes {
            image_size: 12,
            train: 20,
            test: 0,
        };
        let (src, _) = make_synthetic_domain_pair(5, &SyntheticShiftSpec::identity(), &sizes).unwrap();
        let mut src = src;
        src.provenance = Some(Provenance {
            cells: vec![(0.1, 0), (0.3, 1)],
            sample_cells: (0..20).map(|i| i % 2).collect(),
        });
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = DatasetManifest::describe(&src);
        manifest.seed = Some(5);
        manifest.patch = Some(PatchSpec::DIGITS);
        save_dataset(&src, dir.path(), Some(manifest.clone())).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), src);
        assert_eq!(load_manifest(dir.path()).unwrap(), manifest);
    }

    #[test]
    fn tampered_images_are_detected() {
        let sizes = SyntheticSizes {
            image_size: 8,
            train: 10,
            test: 0,
        };
        let (src, _) = make_synthetic_domain_pair(5, &SyntheticShiftSpec::identity(), &sizes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&src, dir.path(), None).unwrap();
        let mut bytes = fs::read(dir.path().join("images.bin")).unwrap();
        bytes[0] ^= 1;
        fs::write(dir.path().join("images.bin"), bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::ChecksumMismatch { .. })));
    }
}
