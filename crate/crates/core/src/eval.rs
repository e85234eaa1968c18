//! Segmentation and error-localization metrics, plus the two comparison
//! mask sources: confidence thresholding and s-ECN argmax agreement.

use std::collections::BTreeMap;

use eln_autograd::{Graph, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::datagen::{stack_images, Sample};
use crate::losses::{argmax_channels, correctness_mask, BinaryMap};
use crate::networks::{build_eln_input, softmax_and_entropy, ErrorModule, SegNetwork, MAIN_DECODER};
use crate::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Invalid(format!("{} predictions for {} labels", pred.len(), truth.len())));
        }
        let c = self.num_classes;
        if let Some(bad) = pred.iter().chain(truth).find(|&&x| x >= c) {
            return Err(Error::Invalid(format!("class {bad} out of range for {c} classes")));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    /// Per-class IoU; `None` where `TP + FP + FN = 0`.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..c).map(|p| self.get(k, p)).sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|t| self.get(t, k)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

/// Mean IoU over classes present in the ground truth or the prediction.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::Invalid("mIoU of an empty confusion matrix".into()));
    }
    let present: Vec<f64> = cm.class_iou().into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::Invalid("every class is degenerate".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Precision / recall / F1 with "marked valid" as the positive class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub images: usize,
    /// Images with no pixel marked valid (precision taken as 0).
    pub images_without_valid: usize,
    /// Images with no correct pixel (recall taken as 0).
    pub images_without_correct: usize,
}

/// Precision and recall per image, averaged over images; F1 from the
/// averaged precision and recall.
pub fn localization_metrics(predicted_valid: &BinaryMap, true_correct: &BinaryMap) -> Result<LocalizationReport> {
    let same = (predicted_valid.batch, predicted_valid.height, predicted_valid.width)
        == (true_correct.batch, true_correct.height, true_correct.width);
    if !same {
        return Err(Error::Invalid("validity and correctness maps differ in shape".into()));
    }
    let mut rep = LocalizationReport { images: predicted_valid.batch, ..Default::default() };
    if rep.images == 0 {
        return Ok(rep);
    }
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    for b in 0..predicted_valid.batch {
        let (v, c) = (predicted_valid.image(b), true_correct.image(b));
        let valid = v.iter().filter(|&&x| x == 1).count();
        let correct = c.iter().filter(|&&x| x == 1).count();
        let both = v.iter().zip(c).filter(|(&a, &b)| a == 1 && b == 1).count();
        if valid == 0 {
            rep.images_without_valid += 1;
        } else {
            p_sum += both as f64 / valid as f64;
        }
        if correct == 0 {
            rep.images_without_correct += 1;
        } else {
            r_sum += both as f64 / correct as f64;
        }
    }
    rep.precision = p_sum / rep.images as f64;
    rep.recall = r_sum / rep.images as f64;
    let pr = rep.precision + rep.recall;
    rep.f1 = if pr > 0.0 { 2.0 * rep.precision * rep.recall / pr } else { 0.0 };
    Ok(rep)
}

/// `1` where the largest class probability is at least `t`.
pub fn threshold_mask<T: Scalar>(probs: &Tensor<T>, t: f64) -> Result<BinaryMap> {
    let (n, c, h, w) = probs.dims4()?;
    let hw = h * w;
    let t = T::from_f64(t);
    let mut values = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let max = (0..c).map(|ch| probs.data()[(b * c + ch) * hw + p]).fold(T::neg_infinity(), T::max);
            values.push(u8::from(max >= t));
        }
    }
    BinaryMap::new(n, h, w, values)
}

/// `1` where the corrected prediction agrees with the original argmax.
pub fn secn_valid_mask<T: Scalar>(corrected: &Tensor<T>, original: &Tensor<T>) -> Result<BinaryMap> {
    if corrected.shape() != original.shape() {
        return Err(Error::Invalid(format!(
            "s-ECN output {:?} does not match prediction {:?}",
            corrected.shape(),
            original.shape()
        )));
    }
    let (n, _, h, w) = corrected.dims4()?;
    let a = argmax_channels(corrected)?;
    let b = argmax_channels(original)?;
    BinaryMap::new(n, h, w, a.iter().zip(&b).map(|(x, y)| u8::from(x == y)).collect())
}

/// Thresholds of the confidence baseline sweep: 0.50, 0.55, ..., 0.95.
pub fn threshold_sweep() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

const INFER_CHUNK: usize = 16;

/// Main-decoder logits for `images [N,3,H,W]`, in chunks, without gradient.
pub fn predict_logits(net: &SegNetwork, params: &ParamStore<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(INFER_CHUNK) {
        let chunk = images.batch_range(start, (start + INFER_CHUNK).min(n))?;
        let g = Graph::new();
        let bound = params.bind(&g, |name| crate::networks::is_student_param(name).then_some(false));
        let feats = net.encoder_forward(&bound, g.constant(chunk))?;
        parts.push(net.decoder_forward(&bound, MAIN_DECODER, &feats)?.logits.value().as_ref().clone());
    }
    Ok(Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)?)
}

/// Error-module output for a given prediction, without gradient.
pub fn error_module_outputs(
    net: &SegNetwork,
    params: &ParamStore<f32>,
    module: ErrorModule,
    images: &Tensor<f32>,
    logits: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let prefix = format!("{}.", module.prefix());
    if !params.iter().any(|(k, _)| k.starts_with(&prefix)) {
        return Err(Error::Prerequisite {
            what: format!("{} parameters", module.prefix()),
            hint: "train stage 1 with this module listed in train.error_modules".into(),
        });
    }
    let n = images.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(INFER_CHUNK) {
        let end = (start + INFER_CHUNK).min(n);
        let (probs, ent) = softmax_and_entropy(&logits.batch_range(start, end)?)?;
        let input = build_eln_input(&images.batch_range(start, end)?, &probs, &ent)?;
        let g = Graph::new();
        let bound = params.bind(&g, |name| name.starts_with(&prefix).then_some(false));
        parts.push(net.error_module_forward(&bound, module, g.constant(input))?.value().as_ref().clone());
    }
    Ok(Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub miou: f64,
    pub class_iou: Vec<Option<f64>>,
    pub pixel_accuracy: f64,
}

fn labeled_only(samples: &[Sample]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut labels = Vec::new();
    for s in samples {
        let l = s.label.as_ref().ok_or_else(|| Error::Invalid("evaluation sample has no label".into()))?;
        labels.extend(l.classes.iter().map(|&c| c as usize));
    }
    Ok((stack_images(samples.iter().map(|s| &s.image))?, labels))
}

pub fn evaluate_segmentation(net: &SegNetwork, params: &ParamStore<f32>, samples: &[Sample]) -> Result<SegmentationReport> {
    let (images, labels) = labeled_only(samples)?;
    let logits = predict_logits(net, params, &images)?;
    let pred = argmax_channels(&logits)?;
    let mut cm = ConfusionMatrix::new(net.config.num_classes);
    cm.accumulate(&pred, &labels)?;
    let correct: u64 = (0..cm.num_classes).map(|k| cm.get(k, k)).sum();
    Ok(SegmentationReport { miou: miou(&cm)?, class_iou: cm.class_iou(), pixel_accuracy: correct as f64 / cm.total() as f64 })
}

/// Localization quality of every available mask source for the main
/// decoder's predictions on `samples` (ground truth used for scoring only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSuite {
    pub methods: BTreeMap<String, LocalizationReport>,
    /// Best F1 over the threshold sweep, and the threshold achieving it.
    pub best_threshold: f64,
    pub best_threshold_f1: f64,
    /// Fraction of pixels the main decoder gets right.
    pub accuracy: f64,
}

pub fn evaluate_localization(
    net: &SegNetwork,
    params: &ParamStore<f32>,
    samples: &[Sample],
    default_threshold: f64,
) -> Result<LocalizationSuite> {
    let (images, labels) = labeled_only(samples)?;
    let logits = predict_logits(net, params, &images)?;
    let (probs, _) = softmax_and_entropy(&logits)?;
    let correct = correctness_mask(&probs, &labels)?;
    let mut methods = BTreeMap::new();
    for module in [ErrorModule::Eln, ErrorModule::Secn] {
        let prefix = format!("{}.", module.prefix());
        if !params.iter().any(|(k, _)| k.starts_with(&prefix)) {
            continue;
        }
        let out = error_module_outputs(net, params, module, &images, &logits)?;
        let mask = match module {
            ErrorModule::Eln => BinaryMap::from_probabilities(&out.map(|z| 1.0 / (1.0 + (-z).exp())))?,
            ErrorModule::Secn => secn_valid_mask(&out, &probs)?,
        };
        methods.insert(module.prefix().to_string(), localization_metrics(&mask, &correct)?);
    }
    let mut best = (0.0, -1.0);
    for t in threshold_sweep() {
        let rep = localization_metrics(&threshold_mask(&probs, t)?, &correct)?;
        if rep.f1 > best.1 {
            best = (t, rep.f1);
        }
        methods.insert(format!("threshold@{t:.2}"), rep);
    }
    methods.insert("threshold".into(), localization_metrics(&threshold_mask(&probs, default_threshold)?, &correct)?);
    Ok(LocalizationSuite {
        methods,
        best_threshold: best.0,
        best_threshold_f1: best.1,
        accuracy: correct.count_ones() as f64 / correct.values.len().max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_miou() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert!((miou(&cm).unwrap() - 7.0 / 12.0).abs() < 1e-12);
        let mut perfect = ConfusionMatrix::new(3);
        perfect.accumulate(&[0, 2, 2], &[0, 2, 2]).unwrap();
        assert_eq!(miou(&perfect).unwrap(), 1.0);
        assert_eq!(perfect.class_iou()[1], None);
        assert!(miou(&ConfusionMatrix::new(3)).is_err());
        assert!(perfect.accumulate(&[3], &[0]).is_err());
    }

    #[test]
    fn four_pixel_localization() {
        let v = BinaryMap::new(1, 2, 2, vec![1, 1, 0, 0]).unwrap();
        let c = BinaryMap::new(1, 2, 2, vec![1, 0, 1, 0]).unwrap();
        let r = localization_metrics(&v, &c).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
        let all = BinaryMap::filled(1, 2, 2, true);
        let r = localization_metrics(&all, &c).unwrap();
        assert_eq!((r.precision, r.recall), (0.5, 1.0));
    }

    #[test]
    fn threshold_examples() {
        let uniform = Tensor::from_vec(&[1, 4, 1, 1], vec![0.25f64; 4]).unwrap();
        assert_eq!(threshold_mask(&uniform, 0.3).unwrap().values, vec![0]);
        assert_eq!(threshold_mask(&uniform, 1e-9).unwrap().values, vec![1]);
        let onehot = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0f64, 0.6, 0.0, 0.4]).unwrap();
        assert_eq!(threshold_mask(&onehot, 1.0).unwrap().values, vec![1, 0]);
    }

    #[test]
    fn secn_agreement() {
        let a = Tensor::from_vec(&[1, 2, 1, 2], vec![0.9f64, 0.1, 0.1, 0.9]).unwrap();
        assert_eq!(secn_valid_mask(&a, &a).unwrap().values, vec![1, 1]);
        let flipped = Tensor::from_vec(&[1, 2, 1, 2], vec![0.1f64, 0.9, 0.9, 0.1]).unwrap();
        assert_eq!(secn_valid_mask(&flipped, &a).unwrap().values, vec![0, 0]);
        let wrong = Tensor::from_vec(&[1, 3, 1, 2], vec![0.0f64; 6]).unwrap();
        assert!(secn_valid_mask(&wrong, &a).is_err());
    }
}
