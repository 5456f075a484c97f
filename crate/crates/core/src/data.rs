//! Datasets: IDX files, synthetic Gaussian blobs, label noise and seeded
//! train/validation/test splits.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Example;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Synthetic,
    Idx(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub input_dim: usize,
    pub provenance: Provenance,
    /// `true` where the label was corrupted by [`inject_label_noise`].
    pub noise_mask: Option<Vec<bool>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            num_classes: self.num_classes,
            input_dim: self.input_dim,
            provenance: self.provenance.clone(),
            noise_mask: self
                .noise_mask
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i]).collect()),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl<'a> IdxReader<'a> {
    fn need(&self, n: usize) -> Result<()> {
        if self.bytes.len() < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                needed: n,
                found: self.bytes.len(),
            });
        }
        Ok(())
    }

    fn u32_at(&self, offset: usize) -> Result<u32> {
        self.need(offset + 4)?;
        let b = &self.bytes[offset..offset + 4];
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Check the magic and return the dimension sizes and payload.
    fn parse(&self, magic: u32, ndims: usize) -> Result<(Vec<usize>, &'a [u8])> {
        let found = self.u32_at(0)?;
        if found != magic {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                expected: magic,
                found,
            });
        }
        let dims = (0..ndims)
            .map(|i| self.u32_at(4 + 4 * i).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let header = 4 + 4 * ndims;
        let payload: usize = dims.iter().product();
        self.need(header + payload)?;
        Ok((dims, &self.bytes[header..header + payload]))
    }
}

/// Load an IDX image file (`u8`, 3 dims) and its label file (`u8`, 1 dim).
/// Pixels are scaled to `[0, 1]` by `/255`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;
    let (dims, pixels) = IdxReader {
        path: images_path,
        bytes: &image_bytes,
    }
    .parse(IDX_IMAGES_MAGIC, 3)?;
    let (ldims, labels) = IdxReader {
        path: labels_path,
        bytes: &label_bytes,
    }
    .parse(IDX_LABELS_MAGIC, 1)?;
    if dims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: dims[0],
            labels: ldims[0],
        });
    }
    let input_dim = dims[1] * dims[2];
    let examples: Vec<Example> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| Example {
            x: pixels[i * input_dim..(i + 1) * input_dim]
                .iter()
                .map(|&p| f64::from(p) / 255.0)
                .collect(),
            y: y as usize,
        })
        .collect();
    let num_classes = examples.iter().map(|e| e.y + 1).max().unwrap_or(0);
    Ok(Dataset {
        examples,
        num_classes,
        input_dim,
        provenance: Provenance::Idx(images_path.to_path_buf()),
        noise_mask: None,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Write `images` (each `rows * cols` bytes) as an IDX image file.
pub fn write_idx_images(path: impl AsRef<Path>, images: &[Vec<u8>], rows: usize, cols: usize) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for img in images {
        if img.len() != rows * cols {
            return Err(Error::contract(format!(
                "image of {} bytes does not match {rows}x{cols}",
                img.len()
            )));
        }
        out.extend_from_slice(img);
    }
    write_file(path.as_ref(), &out)
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write_file(path.as_ref(), &out)
}

/// Isotropic unit-variance Gaussian blobs, one per class, centered at random
/// unit vectors scaled by `class_sep`. Examples are ordered by class.
pub fn synth_blobs(
    num_classes: usize,
    input_dim: usize,
    per_class: usize,
    class_sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || input_dim == 0 || !(class_sep > 0.0) {
        return Err(Error::contract(
            "synth_blobs needs num_classes, input_dim and class_sep to be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / norm * class_sep).collect()
        })
        .collect();
    let mut examples = Vec::with_capacity(num_classes * per_class);
    for (y, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let x = c
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + z
                })
                .collect();
            examples.push(Example { x, y });
        }
    }
    Ok(Dataset {
        examples,
        num_classes,
        input_dim,
        provenance: Provenance::Synthetic,
        noise_mask: None,
    })
}

/// With probability `p`, replace each label by one drawn uniformly from the
/// other `num_classes − 1` labels. The input is left untouched.
pub fn inject_label_noise(dataset: &Dataset, p: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::contract(format!(
            "noise probability must lie in [0, 1], got {p}"
        )));
    }
    if dataset.num_classes < 2 && p > 0.0 {
        return Err(Error::contract("label noise needs at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    let mut mask = Vec::with_capacity(out.len());
    for e in &mut out.examples {
        let flip = rng.random::<f64>() < p;
        if flip {
            let r = rng.random_range(0..dataset.num_classes - 1);
            e.y = if r >= e.y { r + 1 } else { r };
        }
        mask.push(flip);
    }
    out.noise_mask = Some(mask);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Seeded permutation followed by prefix slicing into train, validation and
/// test.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let need = spec.n_train + spec.n_val + spec.n_test;
    if need > dataset.len() {
        return Err(Error::contract(format!(
            "split needs {need} examples but the dataset has {}",
            dataset.len()
        )));
    }
    let mut perm: Vec<usize> = (0..dataset.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (train, rest) = perm.split_at(spec.n_train);
    let (val, rest) = rest.split_at(spec.n_val);
    let test = &rest[..spec.n_test];
    Ok((dataset.subset(train), dataset.subset(val), dataset.subset(test)))
}
