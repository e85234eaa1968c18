use eln_autograd::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabelMap, Sample};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub flip_probability: f64,
    /// Probability of applying the color jitter.
    pub photometric_probability: f64,
    /// Additive brightness delta drawn from `±brightness`.
    pub brightness: f32,
    /// Contrast factor `1 + δ`, `δ ∈ ±contrast`.
    pub contrast: f32,
    /// Saturation factor `1 + δ`, `δ ∈ ±saturation`.
    pub saturation: f32,
    pub grayscale_probability: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            photometric_probability: 0.2,
            brightness: 0.25,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_probability: 0.2,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_probability", self.flip_probability),
            ("photometric_probability", self.photometric_probability),
            ("grayscale_probability", self.grayscale_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} must be in [0,1], got {p}")));
            }
        }
        for (name, s) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("augment.{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

pub fn flip_horizontal(sample: &Sample) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let src = sample.image.data();
    let mut image = Vec::with_capacity(src.len());
    for row in src.chunks_exact(w) {
        image.extend(row.iter().rev());
    }
    let label = sample.label.as_ref().map(|l| {
        let mut classes = Vec::with_capacity(l.classes.len());
        for row in l.classes.chunks_exact(w) {
            classes.extend(row.iter().rev());
        }
        LabelMap { height: h, width: w, classes }
    });
    Sample { image: Tensor::from_vec(&[3, h, w], image).expect("same size"), label }
}

/// Geometric augmentation shared by image and label (and by the teacher and
/// student views of an unlabeled image).
pub fn augment_shared(sample: &Sample, config: &AugmentationConfig, rng: &mut impl Rng) -> Sample {
    let draw: f64 = rng.random();
    if draw < config.flip_probability {
        flip_horizontal(sample)
    } else {
        sample.clone()
    }
}

/// A concrete photometric perturbation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhotometricParams {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub grayscale: bool,
}

impl PhotometricParams {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

/// Draws a perturbation. Always consumes the same number of draws.
pub fn sample_photometric(config: &AugmentationConfig, rng: &mut impl Rng) -> PhotometricParams {
    let jitter_on = rng.random::<f64>() < config.photometric_probability;
    let mut symmetric = |s: f32| rng.random_range(-1.0f32..=1.0) * s;
    let (b, c, s) = (symmetric(config.brightness), symmetric(config.contrast), symmetric(config.saturation));
    let gray_on = rng.random::<f64>() < config.grayscale_probability;
    let mut p = PhotometricParams { grayscale: gray_on, ..Default::default() };
    if jitter_on {
        p.brightness = b;
        p.contrast = c;
        p.saturation = s;
    }
    p
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Brightness, contrast, saturation, then grayscale; clamped to `[0,1]`
/// after each stage. Never moves pixels.
pub fn apply_photometric(image: &Tensor<f32>, params: &PhotometricParams) -> Tensor<f32> {
    let hw = image.shape()[1] * image.shape()[2];
    let mut d = image.data().to_vec();
    let luma = |d: &[f32], p: usize| LUMA[0] * d[p] + LUMA[1] * d[hw + p] + LUMA[2] * d[2 * hw + p];
    if params.brightness != 0.0 {
        d.iter_mut().for_each(|v| *v = (*v + params.brightness).clamp(0.0, 1.0));
    }
    if params.contrast != 0.0 {
        let mean = (0..hw).map(|p| luma(&d, p)).sum::<f32>() / hw as f32;
        let f = 1.0 + params.contrast;
        d.iter_mut().for_each(|v| *v = ((*v - mean) * f + mean).clamp(0.0, 1.0));
    }
    if params.saturation != 0.0 {
        let f = 1.0 + params.saturation;
        for p in 0..hw {
            let g = luma(&d, p);
            for ch in 0..3 {
                d[ch * hw + p] = (g + (d[ch * hw + p] - g) * f).clamp(0.0, 1.0);
            }
        }
    }
    if params.grayscale {
        for p in 0..hw {
            let g = luma(&d, p).clamp(0.0, 1.0);
            for ch in 0..3 {
                d[ch * hw + p] = g;
            }
        }
    }
    Tensor::from_vec(image.shape(), d).expect("same shape")
}

/// The perturbation operator applied to the student's view.
pub fn perturb_photometric(image: &Tensor<f32>, config: &AugmentationConfig, rng: &mut impl Rng) -> Tensor<f32> {
    let params = sample_photometric(config, rng);
    if params.is_identity() {
        image.clone()
    } else {
        apply_photometric(image, &params)
    }
}
