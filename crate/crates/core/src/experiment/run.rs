use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use eln_autograd::{Graph, ParamStore};
use serde::{Deserialize, Serialize};

use super::{prepare_data, stage_hash, ExperimentConfig, PreparedData, CODE_HASH};
use crate::checkpoint::Checkpoint;
use crate::datagen::{stack_images, stack_labels, write_folder_dataset, DatasetManifest, Sample};
use crate::error::IoContext;
use crate::eval::{evaluate_localization, evaluate_segmentation, LocalizationSuite, SegmentationReport};
use crate::losses::ce_per_image_values;
use crate::networks::{aux_prefix, SegNetwork, MAIN_DECODER};
use crate::training::{checkpoint_user_extra, Stage, StepRecord, TrainState, Trainer};
use crate::{Error, Result};

/// File layout of one run (one configuration, one seed).
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.json")
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.ckpt", stage.as_str()))
    }

    /// Mid-stage checkpoint used for resumption.
    pub fn latest(&self) -> PathBuf {
        self.root.join("checkpoints").join("latest.ckpt")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    fn write_provenance(&self, cfg: &ExperimentConfig, seed: u64) -> Result<()> {
        fs::create_dir_all(&self.root).at(&self.root)?;
        let mut resolved = cfg.clone();
        resolved.seeds = vec![seed];
        resolved.output_dir = self.root.clone();
        let path = self.root.join("config.resolved.json");
        fs::write(&path, serde_json::to_string_pretty(&resolved)?).at(&path)?;
        let prov = serde_json::json!({
            "seed": seed,
            "code_hash": CODE_HASH,
            "stage_hashes": {
                "pretrain": stage_hash(cfg, seed, Stage::Pretrain),
                "stage1": stage_hash(cfg, seed, Stage::Stage1),
                "stage2": stage_hash(cfg, seed, Stage::Stage2),
            },
        });
        let path = self.root.join("provenance.json");
        fs::write(&path, serde_json::to_string_pretty(&prov)?).at(&path)
    }
}

fn truncate_metrics(path: &Path, len: u64) -> Result<()> {
    if !path.exists() {
        if len == 0 {
            return Ok(());
        }
        return Err(Error::Checkpoint(format!("{} is missing; cannot resume", path.display())));
    }
    let f = OpenOptions::new().write(true).open(path).at(path)?;
    if f.metadata().at(path)?.len() < len {
        return Err(Error::Checkpoint(format!("{} is shorter than the checkpoint expects", path.display())));
    }
    f.set_len(len).at(path)
}

fn metrics_len(path: &Path) -> Result<u64> {
    Ok(if path.exists() { fs::metadata(path).at(path)?.len() } else { 0 })
}

fn saved_metrics_len(ck: &Checkpoint) -> Result<u64> {
    checkpoint_user_extra(ck)
        .get("metrics_len")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks metrics_len".into()))
}

fn load_checked(path: &Path, expected_hash: &str, what: &str) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.config_hash != expected_hash {
        return Err(Error::Checkpoint(format!(
            "{what} {} was written by a different configuration (hash {} != {})",
            path.display(),
            &ck.config_hash[..ck.config_hash.len().min(12)],
            &expected_hash[..12]
        )));
    }
    Ok(ck)
}

fn previous(stage: Stage) -> Option<Stage> {
    match stage {
        Stage::Pretrain => None,
        Stage::Stage1 => Some(Stage::Pretrain),
        Stage::Stage2 => Some(Stage::Stage1),
    }
}

/// Runs (or resumes) `stage` in `dir`. Earlier stages must have completed
/// there already. A completed stage is left as is.
pub fn run_stage(cfg: &ExperimentConfig, seed: u64, dir: &RunDir, stage: Stage) -> Result<()> {
    let hash = stage_hash(cfg, seed, stage);
    let done = dir.checkpoint(stage);
    if done.exists() {
        load_checked(&done, &hash, "completed checkpoint")?;
        log::info!("{} already complete in {}", stage.as_str(), dir.root.display());
        return Ok(());
    }
    dir.write_provenance(cfg, seed)?;
    let data = prepare_data(cfg, seed)?;
    let net = SegNetwork::new(cfg.model.clone())?;
    let trainer = Trainer::new(net.clone(), cfg.train.clone(), seed)?;
    let config_json = serde_json::to_value(cfg)?;

    let latest = dir.latest();
    let resumable = if latest.exists() {
        let ck = Checkpoint::load(&latest)?;
        if ck.stage == stage.as_str() {
            if ck.config_hash != hash {
                return Err(Error::Checkpoint(format!(
                    "resumable checkpoint {} does not match the configuration",
                    latest.display()
                )));
            }
            Some(ck)
        } else {
            None
        }
    } else {
        None
    };

    let mut state = match resumable {
        Some(ck) => {
            truncate_metrics(&dir.metrics(), saved_metrics_len(&ck)?)?;
            log::info!("resuming {} at iteration {}", stage.as_str(), ck.iteration);
            TrainState::from_checkpoint(&ck, &cfg.train.optim)?
        }
        None => match previous(stage) {
            None => {
                truncate_metrics(&dir.metrics(), 0)?;
                trainer.init_state()
            }
            Some(prev) => {
                let path = dir.checkpoint(prev);
                if !path.exists() {
                    return Err(Error::Prerequisite {
                        what: format!("{} checkpoint {}", prev.as_str(), path.display()),
                        hint: format!("run `eln-lab {}` with the same config and seed first", prev.as_str()),
                    });
                }
                let ck = load_checked(&path, &stage_hash(cfg, seed, prev), "prerequisite checkpoint")?;
                truncate_metrics(&dir.metrics(), saved_metrics_len(&ck)?)?;
                let mut st = TrainState::from_checkpoint(&ck, &cfg.train.optim)?;
                // modules introduced after the previous stage start from their initialization
                let fresh = trainer.init_state().params;
                for (k, v) in fresh.iter() {
                    if !st.params.contains(k) {
                        st.params.insert(k.clone(), v.clone());
                    }
                }
                st.enter_stage(stage, &cfg.train)?;
                st
            }
        },
    };

    let steps = cfg.stages.of(stage);
    let metrics_path = dir.metrics();
    let mut sink = OpenOptions::new().create(true).append(true).open(&metrics_path).at(&metrics_path)?;
    let save = |state: &TrainState, path: &Path| -> Result<()> {
        let extra = serde_json::json!({ "metrics_len": metrics_len(&metrics_path)?, "seed": seed });
        state.to_checkpoint(config_json.clone(), &hash, extra).save(path)
    };
    trainer.run_stage(&mut state, &data.split, steps, &mut |st: &TrainState, rec: &mut StepRecord| {
        if cfg.eval_every > 0 && st.iteration.is_multiple_of(cfg.eval_every) {
            rec.miou = Some(evaluate_segmentation(&net, &st.params, &data.validation)?.miou);
        }
        let line = serde_json::to_string(rec)?;
        writeln!(sink, "{line}").at(&metrics_path)?;
        if cfg.checkpoint_every > 0 && st.iteration.is_multiple_of(cfg.checkpoint_every) && st.iteration < steps {
            sink.flush().at(&metrics_path)?;
            save(st, &latest)?;
        }
        Ok(())
    })?;
    sink.flush().at(&metrics_path)?;
    // a leftover latest.ckpt is harmless: completed stages are skipped and
    // a later stage ignores checkpoints of another stage
    save(&state, &done)?;
    Ok(())
}

/// `eval.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub stage: Stage,
    pub config_hash: String,
    pub code_hash: String,
    /// Main decoder on the validation images.
    pub segmentation: SegmentationReport,
    /// Mean CE on the labeled training images, main decoder first.
    pub decoder_ce: Vec<f64>,
    /// Mask sources scored on the unlabeled training images.
    pub localization: LocalizationSuite,
}

/// Mean CE over `samples` for the main and every auxiliary decoder.
pub fn decoder_cross_entropy(net: &SegNetwork, params: &ParamStore<f32>, samples: &[Sample]) -> Result<Vec<f64>> {
    let k = net.config.num_aux_decoders;
    let mut sums = vec![0.0; k + 1];
    for chunk in samples.chunks(16) {
        let images = stack_images(chunk.iter().map(|s| &s.image))?;
        let maps = chunk
            .iter()
            .map(|s| s.label.as_ref().ok_or_else(|| Error::Invalid("decoder CE needs labeled samples".into())))
            .collect::<Result<Vec<_>>>()?;
        let labels = stack_labels(maps);
        let g = Graph::new();
        let bound = params.bind(&g, |_| Some(false));
        let feats = net.encoder_forward(&bound, g.constant(images))?;
        let prefixes = std::iter::once(MAIN_DECODER.to_string()).chain((1..=k).map(aux_prefix));
        for (i, p) in prefixes.enumerate() {
            let logits = net.decoder_forward(&bound, &p, &feats)?.logits.value();
            sums[i] += ce_per_image_values(&logits, &labels)?.iter().sum::<f64>();
        }
    }
    Ok(sums.into_iter().map(|s| s / samples.len().max(1) as f64).collect())
}

/// The most advanced completed stage checkpoint of a run.
pub fn latest_complete(dir: &RunDir) -> Option<(Stage, PathBuf)> {
    [Stage::Stage2, Stage::Stage1, Stage::Pretrain]
        .into_iter()
        .map(|s| (s, dir.checkpoint(s)))
        .find(|(_, p)| p.exists())
}

/// Evaluates the most advanced completed checkpoint and writes `eval.json`.
/// `threshold` overrides the configured default of the confidence baseline.
pub fn evaluate_run(cfg: &ExperimentConfig, seed: u64, dir: &RunDir, threshold: Option<f64>) -> Result<EvalReport> {
    let threshold = threshold.unwrap_or(cfg.train.stage2.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold must be in [0, 1], got {threshold}")));
    }
    let (stage, path) = latest_complete(dir).ok_or_else(|| Error::Prerequisite {
        what: format!("a completed checkpoint under {}", dir.root.join("checkpoints").display()),
        hint: "run `eln-lab pretrain` (and later stages) first".into(),
    })?;
    let ck = load_checked(&path, &stage_hash(cfg, seed, stage), "checkpoint")?;
    let state = TrainState::from_checkpoint(&ck, &cfg.train.optim)?;
    let data: PreparedData = prepare_data(cfg, seed)?;
    let net = SegNetwork::new(cfg.model.clone())?;
    let report = EvalReport {
        seed,
        stage,
        config_hash: ck.config_hash.clone(),
        code_hash: CODE_HASH.to_string(),
        segmentation: evaluate_segmentation(&net, &state.params, &data.validation)?,
        decoder_ce: decoder_cross_entropy(&net, &state.params, &data.split.labeled)?,
        localization: evaluate_localization(&net, &state.params, &data.unlabeled_with_truth(), threshold)?,
    };
    let out = dir.eval();
    fs::write(&out, serde_json::to_string_pretty(&report)?).at(&out)?;
    Ok(report)
}

/// Writes the synthetic train and validation sets as folder datasets.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let spec = &cfg.data.synthetic;
    for (name, first, count) in [
        ("train", 0u64, cfg.data.train_images),
        ("validation", cfg.data.train_images as u64, cfg.data.validation_images),
    ] {
        let root = out.join(name);
        let samples = crate::datagen::generate_dataset(spec, first, count)?;
        write_folder_dataset(&root, &samples)?;
        let manifest = DatasetManifest { spec: spec.clone(), seed: spec.seed, first_index: first, count };
        let path = root.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
    }
    Ok(())
}
