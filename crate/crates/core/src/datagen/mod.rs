//! Datasets: synthetic shape scenes, folder ingestion, labeled/unlabeled
//! splits and the flip / photometric augmentations.

mod augment;
mod folder;
mod split;
mod synthetic;

use eln_autograd::Tensor;

use crate::{Error, Result};

pub use augment::{
    apply_photometric, augment_shared, flip_horizontal, perturb_photometric, sample_photometric,
    AugmentationConfig, PhotometricParams,
};
pub use folder::{load_folder_dataset, write_folder_dataset, DatasetManifest};
pub use split::{make_splits, DatasetSplit};
pub use synthetic::{generate_dataset, generate_scene, palette_color, ShapeKind, SyntheticSceneSpec};

/// Per-pixel class indices, row-major `[H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::Invalid(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                classes.len()
            )));
        }
        Ok(Self { height, width, classes })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self { height, width, classes: vec![class; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }

    pub fn max_class(&self) -> Option<u8> {
        self.classes.iter().copied().max()
    }

    /// Pixel count per class, `num_classes` bins.
    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &c in &self.classes {
            h[c as usize] += 1;
        }
        h
    }
}

/// One image `[3, H, W]` in `[0, 1]` with an optional label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: Option<LabelMap>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Checks the value ranges: finite image in `[0,1]`, labels below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let shape = self.image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Invalid(format!("image must be [3,H,W], got {shape:?}")));
        }
        if !self.image.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("image values must be finite and within [0,1]".into()));
        }
        if let Some(label) = &self.label {
            if (label.height, label.width) != (shape[1], shape[2]) {
                return Err(Error::Invalid("label size differs from image size".into()));
            }
            if label.max_class().is_some_and(|m| m as usize >= num_classes) {
                return Err(Error::Invalid(format!("label value >= {num_classes}")));
            }
        }
        Ok(())
    }
}

/// Stacks images into `[B, 3, H, W]`.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut count = 0;
    for img in images {
        let s = img.shape();
        match dims {
            None => dims = Some((s[1], s[2])),
            Some(d) if d != (s[1], s[2]) => {
                return Err(Error::Invalid("images in a batch differ in size".into()));
            }
            _ => {}
        }
        data.extend_from_slice(img.data());
        count += 1;
    }
    let (h, w) = dims.ok_or_else(|| Error::Invalid("empty batch".into()))?;
    Ok(Tensor::from_vec(&[count, 3, h, w], data)?)
}

/// Concatenates label maps into a flat `[B*H*W]` index vector.
pub fn stack_labels<'a>(labels: impl IntoIterator<Item = &'a LabelMap>) -> Vec<usize> {
    labels.into_iter().flat_map(|l| l.classes.iter().map(|&c| c as usize)).collect()
}
