//! Datasets, splits and augmentation.

pub mod augment;
pub mod image;
pub mod split;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, AugmentFlags};
pub use image::Image;
pub use split::{make_splits, stratified_partition, DatasetSplit};
pub use synth::{synth_dataset, SynthOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Directory,
    Synthetic,
}

/// Axis-aligned box in pixel coordinates, `x1`/`y1` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PatchBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub source: Source,
    /// Planted-pattern boxes for synthetic data, one per image.
    pub patches: Option<Vec<PatchBox>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.images.first().map_or((0, 0), |i| (i.height, i.width))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Stacks the selected images into an N×3×H×W tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let (h, w) = self.image_size();
        let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
        for &i in indices {
            self.images[i].write_chw(&mut data);
        }
        Tensor::from_parts(vec![indices.len(), 3, h, w], data)
    }
}

pub(crate) fn stack_images(images: &[Image]) -> Tensor {
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        img.write_chw(&mut data);
    }
    Tensor::from_parts(vec![images.len(), 3, h, w], data)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads `root/<class>/<image>.ppm`. Class indices follow the lexicographic
/// order of the subdirectory names; images are resized to `(height, width)`.
pub fn load_image_dataset(root: impl AsRef<Path>, target_size: (usize, usize)) -> Result<Dataset> {
    let root = root.as_ref();
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(Error::Data(format!(
            "{} has {} class directories, need at least 2",
            root.display(),
            class_dirs.len()
        )));
    }
    let (th, tw) = target_size;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.is_file() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
            .collect();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} is empty", dir.display())));
        }
        for f in files {
            images.push(Image::read_ppm(&f)?.resize(tw, th));
            labels.push(label);
        }
        class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
    }
    Ok(Dataset {
        images,
        labels,
        class_names,
        source: Source::Directory,
        patches: None,
    })
}

/// Writes a dataset in the class-per-subdirectory layout. Returns the
/// number of files written.
pub fn write_image_dataset(dataset: &Dataset, root: impl AsRef<Path>) -> Result<usize> {
    let root = root.as_ref();
    let mut per_class = vec![0usize; dataset.n_classes()];
    for name in &dataset.class_names {
        fs::create_dir_all(root.join(name))?;
    }
    for (img, &label) in dataset.images.iter().zip(&dataset.labels) {
        let k = per_class[label];
        per_class[label] += 1;
        img.write_ppm(root.join(&dataset.class_names[label]).join(format!("{k:05}.ppm")))?;
    }
    Ok(dataset.len())
}
