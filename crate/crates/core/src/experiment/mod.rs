//! Experiment configuration, run directories, ablations and plots.

mod ablate;
mod plot;
mod run;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{generate_dataset, load_folder_dataset, make_splits, DatasetSplit, Sample, SyntheticSceneSpec};
use crate::error::IoContext;
use crate::networks::SegModelConfig;
use crate::training::{MaskSource, Stage, TrainConfig};
use crate::{Error, Result};

pub use ablate::{ablate, apply_variant, summary_csv, variant_catalogue, variant_dir_name, AblationSummary, SummaryRow};
pub use plot::{plot_run, read_metrics};
pub use run::{decoder_cross_entropy, evaluate_run, gen_data, latest_complete, run_stage, EvalReport, RunDir};

/// Content hash of the library sources this binary was built from.
pub const CODE_HASH: &str = env!("ELN_CODE_HASH");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: SyntheticSceneSpec,
    pub train_images: usize,
    pub validation_images: usize,
    /// Folder dataset (`images/`, `labels/`) used instead of the generator.
    pub folder: Option<PathBuf>,
    /// Fully labeled validation folder; required with `folder`.
    pub validation_folder: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSceneSpec::default(),
            train_images: 256,
            validation_images: 64,
            folder: None,
            validation_folder: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageLengths {
    pub pretrain: u64,
    pub stage1: u64,
    pub stage2: u64,
}

impl Default for StageLengths {
    fn default() -> Self {
        Self { pretrain: 500, stage1: 2000, stage2: 2000 }
    }
}

impl StageLengths {
    pub fn of(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Pretrain => self.pretrain,
            Stage::Stage1 => self.stage1,
            Stage::Stage2 => self.stage2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    /// Fraction of the training images that keep their labels.
    pub split_ratio: f64,
    pub seeds: Vec<u64>,
    pub model: SegModelConfig,
    pub train: TrainConfig,
    pub stages: StageLengths,
    /// Validation mIoU every this many steps (0 = never during training).
    pub eval_every: u64,
    /// Resumable checkpoint every this many steps (0 = stage ends only).
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
    /// Variant names run by `ablate`.
    pub ablation: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            split_ratio: 0.125,
            seeds: vec![0, 1, 2],
            model: SegModelConfig::default(),
            train: TrainConfig::default(),
            stages: StageLengths::default(),
            eval_every: 250,
            checkpoint_every: 500,
            output_dir: PathBuf::from("runs/default"),
            ablation: variant_catalogue().iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.num_aux_decoders)?;
        if self.data.folder.is_none() {
            self.data.synthetic.validate()?;
            if self.data.synthetic.num_classes != self.model.num_classes {
                return Err(Error::Config(format!(
                    "data.synthetic.num_classes ({}) differs from model.num_classes ({})",
                    self.data.synthetic.num_classes, self.model.num_classes
                )));
            }
            if self.data.train_images < 2 || self.data.validation_images == 0 {
                return Err(Error::Config("data needs >= 2 training and >= 1 validation images".into()));
            }
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio must be in (0, 1), got {}", self.split_ratio)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        for name in &self.ablation {
            apply_variant(self, name)?;
        }
        Ok(())
    }

    /// Paths that must exist when a run starts.
    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.data.folder, &self.data.validation_folder].into_iter().flatten() {
            if !p.is_dir() {
                return Err(Error::Config(format!("data path {} does not exist", p.display())));
            }
        }
        if self.data.folder.is_some() && self.data.validation_folder.is_none() {
            return Err(Error::Config("data.validation_folder is required with data.folder".into()));
        }
        Ok(())
    }
}

/// Reads a JSON config; unknown keys are rejected, missing keys take their
/// defaults, and an empty file means "all defaults".
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).at(path)?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let text = if text.trim().is_empty() { "{}" } else { text };
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of everything that determines the parameters at the end of `stage`.
pub fn stage_hash(cfg: &ExperimentConfig, seed: u64, stage: Stage) -> String {
    let t = &cfg.train;
    let mut v = serde_json::json!({
        "seed": seed,
        "data": cfg.data,
        "split_ratio": cfg.split_ratio,
        "model": cfg.model,
        "optim": t.optim,
        "augment": t.augment,
        "pretrain": cfg.stages.pretrain,
    });
    if stage >= Stage::Stage1 {
        v["alphas"] = serde_json::json!(t.alphas);
        v["error_modules"] = serde_json::json!(t.error_modules);
        v["stage1"] = serde_json::json!(cfg.stages.stage1);
    }
    if stage >= Stage::Stage2 {
        v["ema_beta"] = serde_json::json!(t.ema_beta);
        v["contrastive"] = serde_json::json!(t.contrastive);
        v["stage2_options"] = serde_json::json!(t.stage2);
        v["stage2"] = serde_json::json!(cfg.stages.stage2);
    }
    sha256_hex(v.to_string().as_bytes())
}

/// Training split and validation images of a run.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: DatasetSplit,
    pub validation: Vec<Sample>,
}

impl PreparedData {
    /// Unlabeled training images with their hidden labels, for scoring only.
    pub fn unlabeled_with_truth(&self) -> Vec<Sample> {
        self.split
            .unlabeled
            .iter()
            .zip(self.split.hidden_labels_for_eval())
            .filter_map(|(s, l)| l.as_ref().map(|l| Sample { image: s.image.clone(), label: Some(l.clone()) }))
            .collect()
    }
}

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    cfg.check_paths()?;
    match (&cfg.data.folder, &cfg.data.validation_folder) {
        (Some(train), Some(val)) => {
            let samples = load_folder_dataset(train, cfg.model.num_classes)?;
            if samples.is_empty() {
                return Err(Error::Config(format!("no images under {}", train.join("images").display())));
            }
            let split = if samples.iter().all(|s| s.label.is_some()) {
                make_splits(&samples, cfg.split_ratio, seed)?
            } else {
                DatasetSplit::by_availability(samples)?
            };
            let validation = load_folder_dataset(val, cfg.model.num_classes)?;
            if validation.is_empty() || validation.iter().any(|s| s.label.is_none()) {
                return Err(Error::Config("validation folder must be non-empty and fully labeled".into()));
            }
            Ok(PreparedData { split, validation })
        }
        _ => {
            let spec = &cfg.data.synthetic;
            let train = generate_dataset(spec, 0, cfg.data.train_images)?;
            let validation = generate_dataset(spec, cfg.data.train_images as u64, cfg.data.validation_images)?;
            Ok(PreparedData { split: make_splits(&train, cfg.split_ratio, seed)?, validation })
        }
    }
}

/// The stage-2 mask source a configuration evaluates, as a short label.
pub fn mask_label(m: MaskSource) -> &'static str {
    match m {
        MaskSource::Eln => "eln",
        MaskSource::Secn => "secn",
        MaskSource::Threshold => "threshold",
        MaskSource::None => "none",
    }
}
