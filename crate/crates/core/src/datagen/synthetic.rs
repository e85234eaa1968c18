use eln_autograd::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabelMap, Sample};
use crate::rng::{self, tag};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

/// Recipe for procedurally generated scenes: solid-colored shapes over a
/// noisy background. Class `c ≥ 1` owns a hue; class 0 is background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Inclusive `[min, max]`.
    pub shapes_per_image: [usize; 2],
    pub shape_kinds: Vec<ShapeKind>,
    pub texture_noise_std: f32,
    /// Uniform per-channel offset applied to a shape's class color.
    pub color_jitter: f32,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 4,
            shapes_per_image: [2, 4],
            shape_kinds: vec![ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle],
            texture_noise_std: 0.08,
            color_jitter: 0.12,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Config(format!("num_classes must be in [2, 256], got {}", self.num_classes)));
        }
        if self.shape_kinds.is_empty() {
            return Err(Error::Config("shape_kinds must not be empty".into()));
        }
        if self.shapes_per_image[0] > self.shapes_per_image[1] {
            return Err(Error::Config("shapes_per_image must be [min, max] with min <= max".into()));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config("scene must be at least 4x4".into()));
        }
        if !(self.texture_noise_std >= 0.0 && self.texture_noise_std.is_finite()) {
            return Err(Error::Config("texture_noise_std must be finite and >= 0".into()));
        }
        if !(self.color_jitter >= 0.0 && self.color_jitter.is_finite()) {
            return Err(Error::Config("color_jitter must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Base RGB color of foreground class `class` (≥ 1): evenly spaced hues.
pub fn palette_color(class: usize, num_classes: usize) -> [f32; 3] {
    let hue = (class - 1) as f32 / (num_classes - 1) as f32 * 6.0;
    let (s, v) = (0.75f32, 0.9f32);
    let chroma = v * s;
    let x = chroma * (1.0 - ((hue % 2.0) - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = v - chroma;
    [r + m, g + m, b + m]
}

struct Shape {
    class: u8,
    kind: ShapeKind,
    color: [f32; 3],
    center: (f32, f32),
    half: (f32, f32),
    vertices: [(f32, f32); 3],
}

impl Shape {
    fn contains(&self, y: f32, x: f32) -> bool {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        match self.kind {
            ShapeKind::Rectangle => dy.abs() <= self.half.0 && dx.abs() <= self.half.1,
            ShapeKind::Ellipse => (dy / self.half.0).powi(2) + (dx / self.half.1).powi(2) <= 1.0,
            ShapeKind::Triangle => {
                let [a, b, c] = self.vertices;
                let cross = |p: (f32, f32), q: (f32, f32)| (q.1 - p.1) * (y - p.0) - (q.0 - p.0) * (x - p.1);
                let (d1, d2, d3) = (cross(a, b), cross(b, c), cross(c, a));
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

/// Renders scene `index` of `spec`. Pure function of `(spec, index)`.
pub fn generate_scene(spec: &SyntheticSceneSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = rng::stream(&[tag::SCENE, spec.seed, index]);
    let (h, w, classes) = (spec.height, spec.width, spec.num_classes);
    let background: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.15f32..0.6));
    let count = rng.random_range(spec.shapes_per_image[0]..=spec.shapes_per_image[1]);
    let size = h.min(w) as f32;
    let shapes: Vec<Shape> = (0..count)
        .map(|_| {
            let class = rng.random_range(1..classes);
            let kind = spec.shape_kinds[rng.random_range(0..spec.shape_kinds.len())];
            let base = palette_color(class, classes);
            let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(-1.0f32..=1.0) * spec.color_jitter);
            let color = std::array::from_fn(|i| (base[i] + jitter[i]).clamp(0.0, 1.0));
            let center = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
            let half = (rng.random_range(size / 10.0..size / 4.0), rng.random_range(size / 10.0..size / 4.0));
            let theta = rng.random_range(0.0..std::f32::consts::TAU);
            let radius = half.0.max(half.1);
            let vertices = std::array::from_fn(|k| {
                let r = radius * rng.random_range(0.6f32..=1.0);
                let a = theta + k as f32 * std::f32::consts::TAU / 3.0;
                (center.0 + r * a.sin(), center.1 + r * a.cos())
            });
            Shape { class: class as u8, kind, color, center, half, vertices }
        })
        .collect();

    let noise = Normal::new(0.0f32, spec.texture_noise_std.max(f32::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut image = vec![0.0f32; 3 * h * w];
    let mut label = vec![0u8; h * w];
    for ch in 0..3 {
        for p in 0..h * w {
            let n = if spec.texture_noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            image[ch * h * w + p] = (background[ch] + n).clamp(0.0, 1.0);
        }
    }
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f32 + 0.5, c as f32 + 0.5);
            // later shapes are painted over earlier ones
            if let Some(s) = shapes.iter().rev().find(|s| s.contains(y, x)) {
                label[r * w + c] = s.class;
                for ch in 0..3 {
                    image[ch * h * w + r * w + c] = s.color[ch];
                }
            }
        }
    }
    Ok(Sample { image: Tensor::from_vec(&[3, h, w], image)?, label: Some(LabelMap::new(h, w, label)?) })
}

/// Scenes `first..first+count` of `spec`.
pub fn generate_dataset(spec: &SyntheticSceneSpec, first: u64, count: usize) -> Result<Vec<Sample>> {
    (first..first + count as u64).map(|i| generate_scene(spec, i)).collect()
}
