use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use eln_autograd::Tensor;
use serde::{Deserialize, Serialize};

use super::{LabelMap, Sample, SyntheticSceneSpec};
use crate::error::IoContext;
use crate::{Error, Result};

/// Recorded next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SyntheticSceneSpec,
    pub seed: u64,
    pub first_index: u64,
    pub count: usize,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Reads `images/<stem>.png` (RGB) with optional `labels/<stem>.png`
/// (single channel, value = class index). Sorted by stem.
pub fn load_folder_dataset(root: &Path, num_classes: usize) -> Result<Vec<Sample>> {
    let images = png_stems(&root.join("images"))?;
    let labels = png_stems(&root.join("labels"))?;
    if let Some(orphan) = labels.keys().find(|k| !images.contains_key(*k)) {
        return Err(Error::Ingest { stem: orphan.clone(), message: "label without a matching image".into() });
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, path) in &images {
        let rgb = image::open(path).at(path)?.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            let p = y as usize * w + x as usize;
            for ch in 0..3 {
                data[ch * h * w + p] = f32::from(px[ch]) / 255.0;
            }
        }
        let label = match labels.get(stem) {
            None => None,
            Some(lp) => {
                let luma = image::open(lp).at(lp)?.to_luma8();
                if (luma.width() as usize, luma.height() as usize) != (w, h) {
                    return Err(Error::Ingest {
                        stem: stem.clone(),
                        message: format!("image is {w}x{h} but label is {}x{}", luma.width(), luma.height()),
                    });
                }
                let classes = luma.into_raw();
                if let Some(&bad) = classes.iter().find(|&&c| c as usize >= num_classes) {
                    return Err(Error::Ingest {
                        stem: stem.clone(),
                        message: format!("label value {bad} outside [0, {num_classes})"),
                    });
                }
                Some(LabelMap::new(h, w, classes)?)
            }
        };
        samples.push(Sample { image: Tensor::from_vec(&[3, h, w], data)?, label });
    }
    Ok(samples)
}

/// Writes samples in the folder format, stems zero-padded by index.
pub fn write_folder_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    let (img_dir, lbl_dir) = (root.join("images"), root.join("labels"));
    fs::create_dir_all(&img_dir).at(&img_dir)?;
    fs::create_dir_all(&lbl_dir).at(&lbl_dir)?;
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = (s.height(), s.width());
        let d = s.image.data();
        let rgb = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            image::Rgb(std::array::from_fn(|ch| (d[ch * h * w + p] * 255.0).round().clamp(0.0, 255.0) as u8))
        });
        let path = img_dir.join(format!("{i:05}.png"));
        rgb.save(&path).at(&path)?;
        if let Some(l) = &s.label {
            let luma = image::GrayImage::from_raw(w as u32, h as u32, l.classes.clone())
                .ok_or_else(|| Error::Invalid("label buffer size".into()))?;
            let path = lbl_dir.join(format!("{i:05}.png"));
            luma.save(&path).at(&path)?;
        }
    }
    Ok(())
}
