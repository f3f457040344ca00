//! Loaders for standard archive layouts.
//!
//! | name              | files under `root`                                          |
//! |-------------------|-------------------------------------------------------------|
//! | `mnist`           | `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`        |
//! | `mnist-test`      | `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`          |
//! | `cifar10`         | `data_batch_1.bin` … `data_batch_5.bin`                     |
//! | `cifar10-test`    | `test_batch.bin`                                            |
//! | `synthetic`       | none; generates the default glyph pair and returns source   |
//! | `synthetic-shifted` | none; same pair, returns the shifted domain               |
//! | `dir`             | a directory written by [`super::save_dataset`]               |
//!
//! When `root/SHA256SUMS` exists (`<hex digest>  <file name>` per line), every
//! file read is verified against it. Grayscale images are replicated to three
//! channels and zero-padded (centered) to 32×32; intensities are unchanged.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::synthetic::{make_synthetic_domain_pair, SyntheticShiftSpec, SyntheticSizes};
use super::{load_dataset, DomainDataset, ImageShape};
use crate::error::{Error, Result};

const DEFAULT_SYNTHETIC_SEED: u64 = 2021;

pub fn ingest_dataset(name: &str, root: &Path) -> Result<DomainDataset> {
    match name {
        "synthetic" | "synthetic-shifted" => {
            let (source, shifted) = make_synthetic_domain_pair(
                DEFAULT_SYNTHETIC_SEED,
                &SyntheticShiftSpec::strong_tint(),
                &SyntheticSizes::default(),
            )?;
            Ok(if name == "synthetic" { source } else { shifted })
        }
        "dir" => load_dataset(root),
        "mnist" | "mnist-test" => {
            let prefix = if name == "mnist" { "train" } else { "t10k" };
            let sums = read_checksums(root)?;
            let images = read_verified(root, &format!("{prefix}-images-idx3-ubyte"), &sums)?;
            let labels = read_verified(root, &format!("{prefix}-labels-idx1-ubyte"), &sums)?;
            let gray = parse_idx(name, &images, &labels)?;
            Ok(replicate_and_pad(&gray, 32, 32))
        }
        "cifar10" | "cifar10-test" => {
            let files: Vec<String> = if name == "cifar10" {
                (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
            } else {
                vec!["test_batch.bin".into()]
            };
            let sums = read_checksums(root)?;
            let mut images = Vec::new();
            let mut labels = Vec::new();
            for file in files {
                let bytes = read_verified(root, &file, &sums)?;
                parse_cifar_batch(&bytes, &mut images, &mut labels)?;
            }
            let shape = ImageShape {
                height: 32,
                width: 32,
                channels: 3,
            };
            DomainDataset::new(name, shape, 10, 0, images, labels)
        }
        other => Err(Error::UnknownDataset(other.to_string())),
    }
}

/// Replicates single-channel images to three channels and zero-pads them,
/// centered, to `height × width`. Three-channel input is only padded.
pub fn replicate_and_pad(dataset: &DomainDataset, height: usize, width: usize) -> DomainDataset {
    let src = dataset.shape;
    assert!(src.height <= height && src.width <= width, "padding cannot shrink images");
    let shape = ImageShape {
        height,
        width,
        channels: 3,
    };
    let top = (height - src.height) / 2;
    let left = (width - src.width) / 2;
    let mut images = vec![0u8; dataset.len() * shape.pixels()];
    for i in 0..dataset.len() {
        let img = dataset.image(i);
        let out = &mut images[i * shape.pixels()..(i + 1) * shape.pixels()];
        for y in 0..src.height {
            for x in 0..src.width {
                for c in 0..3 {
                    let sc = if src.channels == 1 { 0 } else { c };
                    out[((y + top) * width + x + left) * 3 + c] = img[(y * src.width + x) * src.channels + sc];
                }
            }
        }
    }
    let mut out = DomainDataset::new(
        dataset.name.clone(),
        shape,
        dataset.num_classes,
        dataset.domain_tag,
        images,
        dataset.labels().to_vec(),
    )
    .expect("geometry preserved");
    out.provenance = dataset.provenance.clone();
    out
}

fn read_checksums(root: &Path) -> Result<HashMap<String, String>> {
    let path = root.join("SHA256SUMS");
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let text = fs::read_to_string(&path)?;
    let mut sums = HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some(digest), Some(file)) => {
                sums.insert(file.trim_start_matches('*').to_string(), digest.to_lowercase());
            }
            _ => return Err(Error::format("SHA256SUMS", format!("bad line `{line}`"))),
        }
    }
    Ok(sums)
}

fn read_verified(root: &Path, file: &str, sums: &HashMap<String, String>) -> Result<Vec<u8>> {
    let path = root.join(file);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let bytes = fs::read(&path)?;
    if let Some(expected) = sums.get(file) {
        let found = hex::encode(Sha256::digest(&bytes));
        if &found != expected {
            return Err(Error::ChecksumMismatch {
                path,
                expected: expected.clone(),
                found,
            });
        }
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<usize> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .ok_or_else(|| Error::format("idx file", "truncated header"))
}

fn parse_idx(name: &str, images: &[u8], labels: &[u8]) -> Result<DomainDataset> {
    if be_u32(images, 0)? != 0x0803 || be_u32(labels, 0)? != 0x0801 {
        return Err(Error::format("idx file", "bad magic number"));
    }
    let n = be_u32(images, 4)?;
    let (h, w) = (be_u32(images, 8)?, be_u32(images, 12)?);
    if be_u32(labels, 4)? != n {
        return Err(Error::format("idx file", "image and label counts differ"));
    }
    let pixels = images
        .get(16..16 + n * h * w)
        .ok_or_else(|| Error::format("idx file", "truncated image data"))?;
    let labels = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::format("idx file", "truncated label data"))?;
    let shape = ImageShape {
        height: h,
        width: w,
        channels: 1,
    };
    DomainDataset::new(
        name,
        shape,
        10,
        0,
        pixels.to_vec(),
        labels.iter().map(|&l| usize::from(l)).collect(),
    )
}

/// CIFAR-10 binary records: 1 label byte then 3072 bytes of planar R, G, B.
fn parse_cifar_batch(bytes: &[u8], images: &mut Vec<u8>, labels: &mut Vec<usize>) -> Result<()> {
    const RECORD: usize = 1 + 3072;
    if !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::format("cifar batch", format!("{} bytes is not a whole number of records", bytes.len())));
    }
    for record in bytes.chunks_exact(RECORD) {
        labels.push(usize::from(record[0]));
        let planes = &record[1..];
        for p in 0..1024 {
            images.extend([planes[p], planes[1024 + p], planes[2048 + p]]);
        }
    }
    Ok(())
}
