use rand::seq::SliceRandom;

use super::{LabelMap, Sample};
use crate::rng::{self, tag};
use crate::{Error, Result};

/// Labeled / unlabeled partition. Labels of the unlabeled partition are
/// stripped from the samples and kept aside for evaluation only.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    hidden_labels: Vec<Option<LabelMap>>,
    pub labeled_indices: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

impl DatasetSplit {
    /// Ground truth of the unlabeled partition, for metrics only.
    pub fn hidden_labels_for_eval(&self) -> &[Option<LabelMap>] {
        &self.hidden_labels
    }

    /// Partition by label availability (folder datasets with unlabeled images).
    pub fn by_availability(samples: Vec<Sample>) -> Result<Self> {
        let total = samples.len();
        let mut split = Self {
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            hidden_labels: Vec::new(),
            labeled_indices: Vec::new(),
            unlabeled_indices: Vec::new(),
            ratio: 0.0,
            seed: 0,
        };
        for (i, s) in samples.into_iter().enumerate() {
            if s.label.is_some() {
                split.labeled.push(s);
                split.labeled_indices.push(i);
            } else {
                split.unlabeled.push(s);
                split.hidden_labels.push(None);
                split.unlabeled_indices.push(i);
            }
        }
        if split.labeled.is_empty() {
            return Err(Error::Config("dataset has no labeled samples".into()));
        }
        split.ratio = split.labeled.len() as f64 / total as f64;
        Ok(split)
    }
}

/// Seeded random split with `round(ratio · n)` labeled samples.
pub fn make_splits(samples: &[Sample], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    if samples.iter().any(|s| s.label.is_none()) {
        return Err(Error::Config("make_splits needs fully labeled samples".into()));
    }
    let n = samples.len();
    let n_labeled = (ratio * n as f64).round() as usize;
    if n_labeled == 0 {
        return Err(Error::Config(format!("ratio {ratio} over {n} samples yields no labeled sample")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(&[tag::SPLIT, seed]));
    let mut labeled_indices = order[..n_labeled].to_vec();
    let mut unlabeled_indices = order[n_labeled..].to_vec();
    labeled_indices.sort_unstable();
    unlabeled_indices.sort_unstable();
    let labeled = labeled_indices.iter().map(|&i| samples[i].clone()).collect();
    let mut hidden_labels = Vec::with_capacity(unlabeled_indices.len());
    let unlabeled = unlabeled_indices
        .iter()
        .map(|&i| {
            hidden_labels.push(samples[i].label.clone());
            Sample { image: samples[i].image.clone(), label: None }
        })
        .collect();
    Ok(DatasetSplit { labeled, unlabeled, hidden_labels, labeled_indices, unlabeled_indices, ratio, seed })
}
