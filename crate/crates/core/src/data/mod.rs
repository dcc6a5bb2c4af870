//! Directory-per-class image datasets: loading, resizing, stratified split,
//! and batching with rotation augmentation.

mod image;
mod synthetic;

use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

pub use self::image::{augment_rotate, decode_image, encode_raw, resize, rotate, RAW_HEADER_LEN};
pub use self::synthetic::{write_synthetic_dataset, SYNTHETIC_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::{streams, Rng, Tensor};

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "raw"];

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[3, h, w]` with values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub source_path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subset {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    class_names: Vec<String>,
    items: Vec<LabeledImage>,
    tags: Vec<Option<Subset>>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, items: Vec<LabeledImage>) -> Result<Self> {
        for item in &items {
            if item.label >= class_names.len() {
                return Err(Error::arg(format!(
                    "label {} out of range for {} classes",
                    item.label,
                    class_names.len()
                )));
            }
            if item.pixels.rank() != 3 || item.pixels.shape()[0] != 3 {
                return Err(Error::arg(format!(
                    "{}: expected [3, h, w] pixels, got {:?}",
                    item.source_path.display(),
                    item.pixels.shape()
                )));
            }
            if item.pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::arg(format!(
                    "{}: pixel values must lie in [0, 1]",
                    item.source_path.display()
                )));
            }
        }
        let tags = vec![None; items.len()];
        Ok(Self {
            class_names,
            items,
            tags,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn items(&self) -> &[LabeledImage] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn tag(&self, index: usize) -> Option<Subset> {
        self.tags[index]
    }

    /// Marks every item as part of `subset`, e.g. to evaluate a whole directory.
    pub fn tag_all(&mut self, subset: Subset) {
        self.tags.fill(Some(subset));
    }

    pub fn subset_indices(&self, subset: Subset) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.tags[i] == Some(subset))
            .collect()
    }

    pub fn subset_len(&self, subset: Subset) -> usize {
        self.tags.iter().filter(|&&t| t == Some(subset)).count()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for item in &self.items {
            counts[item.label] += 1;
        }
        counts
    }

    /// Resizes every image to `height x width`.
    pub fn resize_all(&mut self, height: usize, width: usize) -> Result<()> {
        self.items.par_iter_mut().try_for_each(|item| {
            item.pixels = resize(&item.pixels, height, width)?;
            Ok(())
        })
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

/// Loads `root/<class>/*.{png,jpg,jpeg,raw}`. Classes are the subdirectories in
/// lexicographic order; files within a class are read in lexicographic order.
/// Undecodable files are skipped with a warning.
pub fn load_dataset(root: &Path, expected_classes: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Structure(format!("{} is not a directory", root.display())));
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.len() != expected_classes {
        return Err(Error::Structure(format!(
            "{} has {} class directories, expected {expected_classes}",
            root.display(),
            dirs.len()
        )));
    }
    let mut class_names = Vec::with_capacity(dirs.len());
    let mut items = Vec::new();
    for (label, dir) in dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Structure(format!("{} is not valid UTF-8", dir.display())))?
            .to_string();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let decoded: Vec<(PathBuf, Result<Tensor<f32>>)> = files
            .into_par_iter()
            .map(|path| {
                let res = if has_image_extension(&path) {
                    decode_image(&path)
                } else {
                    Err(Error::Decode {
                        path: path.clone(),
                        reason: "unsupported extension".into(),
                    })
                };
                (path, res)
            })
            .collect();
        let before = items.len();
        for (path, res) in decoded {
            match res {
                Ok(pixels) => items.push(LabeledImage {
                    pixels,
                    label,
                    source_path: path,
                }),
                Err(e) => warn!("skipping {}: {e}", path.display()),
            }
        }
        if items.len() == before {
            return Err(Error::Structure(format!("class {name:?} has no decodable images")));
        }
        class_names.push(name);
    }
    Dataset::new(class_names, items)
}

/// Per-class training counts for a stratified split.
///
/// Each class gets `ceil(frac * n_c)` clamped to `[1, n_c - 1]`. If the sum
/// exceeds `ceil(frac * N)`, the largest classes (ties: lower index) give back
/// one item each until it matches.
pub fn stratified_train_counts(class_sizes: &[usize], train_frac: f64) -> Result<Vec<usize>> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::arg(format!("train fraction {train_frac} must be in (0, 1)")));
    }
    if let Some(c) = class_sizes.iter().position(|&n| n < 2) {
        return Err(Error::arg(format!(
            "class {c} has {} items; a split needs at least 2",
            class_sizes[c]
        )));
    }
    // Tolerance keeps exact products such as 0.8 * 2240 from rounding up.
    let ceil = |x: f64| (x - 1e-9).ceil() as usize;
    let mut counts: Vec<usize> = class_sizes
        .iter()
        .map(|&n| ceil(train_frac * n as f64).clamp(1, n - 1))
        .collect();
    let total: usize = class_sizes.iter().sum();
    let target = ceil(train_frac * total as f64);
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    order.sort_by(|&a, &b| class_sizes[b].cmp(&class_sizes[a]).then(a.cmp(&b)));
    let mut excess = counts.iter().sum::<usize>().saturating_sub(target);
    for &c in &order {
        if excess == 0 {
            break;
        }
        if counts[c] > 1 {
            counts[c] -= 1;
            excess -= 1;
        }
    }
    Ok(counts)
}

/// Stratified train/test assignment. Each class is shuffled with its own
/// stream from `seed`; the first [`stratified_train_counts`] items train.
pub fn split(mut ds: Dataset, train_frac: f64, seed: u64) -> Result<Dataset> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, item) in ds.items.iter().enumerate() {
        per_class[item.label].push(i);
    }
    let sizes: Vec<usize> = per_class.iter().map(Vec::len).collect();
    let counts = stratified_train_counts(&sizes, train_frac)?;
    for (c, (mut idx, n_train)) in per_class.into_iter().zip(counts).enumerate() {
        Rng::derived(seed, streams::SPLIT, c as u64).shuffle(&mut idx);
        for (rank, i) in idx.into_iter().enumerate() {
            ds.tags[i] = Some(if rank < n_train {
                Subset::Train
            } else {
                Subset::Test
            });
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
    /// Selects the shuffle order and augmentation draws for this pass.
    pub epoch: u64,
    /// Applied to the train subset only; 0 disables.
    pub max_rotation_deg: f64,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            shuffle: false,
            seed: 0,
            epoch: 0,
            max_rotation_deg: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[b, 3, h, w]`.
    pub images: Tensor<f32>,
    /// One-hot `[b, num_classes]`.
    pub labels: Tensor<f32>,
    /// Dataset indices of the rows.
    pub indices: Vec<usize>,
}

pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    opts: BatchOptions,
    augment: bool,
    image_shape: Vec<usize>,
}

/// Iterates one epoch over `subset`. The last batch may be short.
pub fn batches<'a>(ds: &'a Dataset, subset: Subset, opts: &BatchOptions) -> Result<Batches<'a>> {
    if opts.batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    if !(opts.max_rotation_deg >= 0.0 && opts.max_rotation_deg.is_finite()) {
        return Err(Error::arg("max rotation must be finite and non-negative"));
    }
    let mut order = ds.subset_indices(subset);
    if order.is_empty() {
        return Err(Error::arg(format!("{subset:?} subset is empty")));
    }
    let image_shape = ds.items[order[0]].pixels.shape().to_vec();
    if let Some(&bad) = order.iter().find(|&&i| ds.items[i].pixels.shape() != image_shape.as_slice()) {
        return Err(Error::dim(
            "batch images",
            ds.items[bad].pixels.shape(),
            &image_shape,
        ));
    }
    if opts.shuffle {
        Rng::derived(opts.seed, streams::SHUFFLE, opts.epoch).shuffle(&mut order);
    }
    Ok(Batches {
        ds,
        order,
        pos: 0,
        opts: opts.clone(),
        augment: subset == Subset::Train && opts.max_rotation_deg > 0.0,
        image_shape,
    })
}

impl Batches<'_> {
    fn assemble(&self, indices: &[usize]) -> Result<Batch> {
        let per = self.image_shape.iter().product::<usize>();
        let k = self.ds.num_classes();
        let images: Vec<Vec<f32>> = indices
            .par_iter()
            .map(|&i| -> Result<Vec<f32>> {
                let pixels = &self.ds.items[i].pixels;
                if !self.augment {
                    return Ok(pixels.data().to_vec());
                }
                let stream = (self.opts.epoch << 24) | i as u64;
                let mut rng = Rng::derived(self.opts.seed, streams::AUGMENT, stream);
                Ok(augment_rotate(pixels, self.opts.max_rotation_deg, &mut rng)?.0.into_data())
            })
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(per * indices.len());
        for img in images {
            data.extend(img);
        }
        let mut labels = vec![0.0f32; indices.len() * k];
        for (r, &i) in indices.iter().enumerate() {
            labels[r * k + self.ds.items[i].label] = 1.0;
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.image_shape);
        Ok(Batch {
            images: Tensor::new(shape, data)?,
            labels: Tensor::new([indices.len(), k], labels)?,
            indices: indices.to_vec(),
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.opts.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.opts.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.assemble(&indices))
    }
}
