use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{evaluate_run, run_stage, EvalReport, RunDir};
use super::{stage_hash, ExperimentConfig};
use crate::error::IoContext;
use crate::training::{MaskSource, Stage};
use crate::{Error, Result};

const ALPHA_LADDER: [f64; 3] = [20.0, 50.0, 100.0];

/// Every variant name `ablate` understands.
pub fn variant_catalogue() -> Vec<&'static str> {
    vec![
        "method:eln",
        "method:secn",
        "method:threshold",
        "decoders:0",
        "decoders:1",
        "decoders:2",
        "decoders:3",
        "loss:pseudo",
        "loss:contra",
        "loss:both",
        "loss:threshold",
        "mask:none",
    ]
}

/// The base configuration with one variant applied.
///
/// `method:*` picks the stage-2 mask source. `decoders:K` sets the number of
/// auxiliary decoders with the first K of the 20/50/100 margins.
/// `loss:*` picks the unlabeled losses under the ELN mask, except
/// `loss:threshold`, which trains the pseudo loss under a confidence
/// threshold mask. `mask:none` keeps both losses on every pixel.
pub fn apply_variant(base: &ExperimentConfig, name: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    let s2 = &mut cfg.train.stage2;
    let (kind, arg) = name
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("variant `{name}` is not of the form kind:value")))?;
    match (kind, arg) {
        ("method", "eln") => s2.mask = MaskSource::Eln,
        ("method", "secn") => s2.mask = MaskSource::Secn,
        ("method", "threshold") => s2.mask = MaskSource::Threshold,
        ("decoders", k) => {
            let k: usize = k
                .parse()
                .ok()
                .filter(|&k| k <= ALPHA_LADDER.len())
                .ok_or_else(|| Error::Config(format!("variant `{name}`: decoder count must be 0..=3")))?;
            cfg.model.num_aux_decoders = k;
            cfg.train.alphas = ALPHA_LADDER[..k].to_vec();
        }
        ("loss", l) => {
            s2.mask = MaskSource::Eln;
            (s2.use_pseudo, s2.use_contra) = match l {
                "pseudo" => (true, false),
                "contra" => (false, true),
                "both" => (true, true),
                "threshold" => {
                    s2.mask = MaskSource::Threshold;
                    (true, false)
                }
                _ => return Err(Error::Config(format!("unknown variant `{name}`"))),
            };
        }
        ("mask", "none") => s2.mask = MaskSource::None,
        _ => return Err(Error::Config(format!("unknown variant `{name}`"))),
    }
    cfg.ablation = Vec::new();
    cfg.model.validate()?;
    cfg.train.validate(cfg.model.num_aux_decoders)?;
    Ok(cfg)
}

/// Directory name for a variant (`:` is not portable in paths).
pub fn variant_dir_name(name: &str) -> String {
    name.replace(':', "-")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub seeds: usize,
    pub miou_mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub miou_std: f64,
    pub f1_eln_mean: Option<f64>,
    pub f1_secn_mean: Option<f64>,
    pub f1_threshold_best_mean: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct AblationSummary {
    pub rows: Vec<SummaryRow>,
    /// Stage-2 reports per variant, in seed order.
    pub runs: BTreeMap<String, Vec<EvalReport>>,
    /// Stage-1 reports per seed of each variant.
    pub stage1: BTreeMap<String, Vec<EvalReport>>,
    /// `(variant, seed, error)` of sub-runs that failed.
    pub failures: Vec<(String, u64, String)>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn mean_of(reports: &[EvalReport], key: impl Fn(&EvalReport) -> Option<f64>) -> Option<f64> {
    let xs: Option<Vec<f64>> = reports.iter().map(key).collect();
    xs.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

impl SummaryRow {
    pub fn from_reports(variant: &str, stage2: &[EvalReport], stage1: &[EvalReport]) -> Self {
        let mious: Vec<f64> = stage2.iter().map(|r| r.segmentation.miou).collect();
        let f1 = |m: &'static str| mean_of(stage1, move |r| r.localization.methods.get(m).map(|x| x.f1));
        Self {
            variant: variant.to_string(),
            seeds: stage2.len(),
            miou_mean: mean(&mious),
            miou_std: sample_std(&mious),
            f1_eln_mean: f1("eln"),
            f1_secn_mean: f1("secn"),
            f1_threshold_best_mean: mean_of(stage1, |r| Some(r.localization.best_threshold_f1)),
        }
    }
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("variant,seeds,miou_mean,miou_std,f1_eln_mean,f1_secn_mean,f1_threshold_best_mean\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{},{},{}\n",
            r.variant,
            r.seeds,
            r.miou_mean,
            r.miou_std,
            cell(r.f1_eln_mean),
            cell(r.f1_secn_mean),
            cell(r.f1_threshold_best_mean)
        ));
    }
    out
}

fn copy_file(from: &Path, to: &Path) -> Result<()> {
    if let Some(dir) = to.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::copy(from, to).at(from)?;
    Ok(())
}

fn read_eval(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path).at(path)?)?)
}

/// Pretraining and stage 1 in a directory shared by every variant that
/// agrees on them, evaluated once.
fn shared_stage1(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<(RunDir, EvalReport)> {
    let hash = stage_hash(cfg, seed, Stage::Stage1);
    let dir = RunDir::new(out.join(format!("stage1-{}", &hash[..12])));
    run_stage(cfg, seed, &dir, Stage::Pretrain)?;
    run_stage(cfg, seed, &dir, Stage::Stage1)?;
    let report = match read_eval(&dir.eval()) {
        Ok(r) if r.config_hash == hash && r.stage == Stage::Stage1 => r,
        _ => evaluate_run(cfg, seed, &dir, None)?,
    };
    Ok((dir, report))
}

fn variant_run(cfg: &ExperimentConfig, seed: u64, shared: &RunDir, dir: &RunDir) -> Result<EvalReport> {
    let done = dir.checkpoint(Stage::Stage2);
    if !done.exists() && !dir.latest().exists() {
        copy_file(&shared.checkpoint(Stage::Stage1), &dir.checkpoint(Stage::Stage1))?;
        copy_file(&shared.metrics(), &dir.metrics())?;
    }
    run_stage(cfg, seed, dir, Stage::Stage2)?;
    match read_eval(&dir.eval()) {
        Ok(r) if r.config_hash == stage_hash(cfg, seed, Stage::Stage2) && r.stage == Stage::Stage2 => Ok(r),
        _ => evaluate_run(cfg, seed, dir, None),
    }
}

/// Runs every variant in `cfg.ablation` over `cfg.seeds` under `out` and
/// writes `summary.csv` there. Sub-run failures are recorded, not fatal.
pub fn ablate(cfg: &ExperimentConfig, out: &Path) -> Result<AblationSummary> {
    if cfg.ablation.is_empty() {
        return Err(Error::Config("ablation lists no variants".into()));
    }
    fs::create_dir_all(out).at(out)?;
    let mut summary = AblationSummary::default();
    // identical resolved configurations (e.g. method:eln and loss:both) run once
    let mut finished: BTreeMap<String, PathBuf> = BTreeMap::new();
    for name in &cfg.ablation {
        let vcfg = apply_variant(cfg, name)?;
        let (mut s2, mut s1) = (Vec::new(), Vec::new());
        for &seed in &cfg.seeds {
            let dir = RunDir::new(out.join(variant_dir_name(name)).join(format!("seed-{seed}")));
            let result = (|| -> Result<(EvalReport, EvalReport)> {
                let (shared, first) = shared_stage1(&vcfg, seed, out)?;
                let key = stage_hash(&vcfg, seed, Stage::Stage2);
                let second = match finished.get(&key) {
                    Some(src) if *src != dir.root => {
                        let src = RunDir::new(src.clone());
                        for f in [src.checkpoint(Stage::Stage1), src.checkpoint(Stage::Stage2), src.metrics(), src.eval()] {
                            copy_file(&f, &dir.root.join(f.strip_prefix(&src.root).expect("inside run")))?;
                        }
                        read_eval(&dir.eval())?
                    }
                    _ => variant_run(&vcfg, seed, &shared, &dir)?,
                };
                finished.insert(key, dir.root.clone());
                Ok((second, first))
            })();
            match result {
                Ok((second, first)) => {
                    log::info!("{name} seed {seed}: mIoU {:.4}", second.segmentation.miou);
                    s2.push(second);
                    s1.push(first);
                }
                Err(e) => {
                    log::error!("{name} seed {seed} failed: {e}");
                    summary.failures.push((name.clone(), seed, e.to_string()));
                }
            }
        }
        if !s2.is_empty() {
            summary.rows.push(SummaryRow::from_reports(name, &s2, &s1));
        }
        summary.runs.insert(name.clone(), s2);
        summary.stage1.insert(name.clone(), s1);
    }
    let path = out.join("summary.csv");
    fs::write(&path, summary_csv(&summary.rows)).at(&path)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalogue_variants_all_apply() {
        let base = ExperimentConfig::default();
        for v in variant_catalogue() {
            apply_variant(&base, v).unwrap();
        }
        let k3 = apply_variant(&base, "decoders:3").unwrap();
        assert_eq!(k3.train.alphas, vec![20.0, 50.0, 100.0]);
        assert!(apply_variant(&base, "decoders:4").is_err());
        assert!(apply_variant(&base, "loss:none").is_err());
        assert!(apply_variant(&base, "eln").is_err());
    }

    #[test]
    fn std_is_sample_std() {
        assert_eq!(sample_std(&[0.5]), 0.0);
        assert!((sample_std(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-12);
    }
}
