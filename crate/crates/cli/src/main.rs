use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use eln_core::experiment::{
    ablate, evaluate_run, gen_data, parse_config, plot_run, run_stage, ExperimentConfig, RunDir,
};
use eln_core::training::Stage;

/// Semi-supervised segmentation with an error localization network.
#[derive(Parser)]
#[command(name = "eln-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and validation sets as PNG folders.
    GenData(Common),
    /// Supervised pretraining of the encoder and main decoder.
    Pretrain(RunArgs),
    /// Auxiliary decoders and error modules on labeled data.
    Stage1(RunArgs),
    /// Mean-teacher training on unlabeled data.
    Stage2 {
        #[command(flatten)]
        run: RunArgs,
        /// Keep the error modules fixed during stage 2.
        #[arg(long)]
        freeze_eln: bool,
    },
    /// Evaluate the latest completed stage and write eval.json.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Confidence threshold reported as the default baseline.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run every configured ablation variant over every seed.
    Ablate(Common),
    /// Render PNG charts for a run or ablation directory.
    Plot {
        #[command(flatten)]
        run: RunArgs,
        /// Directory to plot instead of the seed's run directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run_dir(cfg: &ExperimentConfig, seed: u64) -> RunDir {
    RunDir::new(cfg.output_dir.join(format!("seed-{seed}")))
}

fn resolve(run: &RunArgs) -> Result<(ExperimentConfig, u64, RunDir)> {
    let cfg = load(&run.common)?;
    let seed = run.seed.unwrap_or(cfg.seeds[0]);
    let dir = run_dir(&cfg, seed);
    Ok((cfg, seed, dir))
}

fn train(run: &RunArgs, stage: Stage, tweak: impl FnOnce(&mut ExperimentConfig)) -> Result<()> {
    let (mut cfg, seed, dir) = resolve(run)?;
    tweak(&mut cfg);
    cfg.validate()?;
    run_stage(&cfg, seed, &dir, stage)?;
    println!("{} done: {}", stage.as_str(), dir.checkpoint(stage).display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = load(&common)?;
            let out = cfg.output_dir.join("data");
            gen_data(&cfg, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Pretrain(run) => train(&run, Stage::Pretrain, |_| {})?,
        Command::Stage1(run) => train(&run, Stage::Stage1, |_| {})?,
        Command::Stage2 { run, freeze_eln } => train(&run, Stage::Stage2, |c| c.train.stage2.freeze_eln |= freeze_eln)?,
        Command::Eval { run, threshold } => {
            let (cfg, seed, dir) = resolve(&run)?;
            let report = evaluate_run(&cfg, seed, &dir, threshold)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate(common) => {
            let cfg = load(&common)?;
            let summary = ablate(&cfg, &cfg.output_dir)?;
            for r in &summary.rows {
                println!("{:<18} seeds={} miou={:.4}±{:.4}", r.variant, r.seeds, r.miou_mean, r.miou_std);
            }
            if !summary.failures.is_empty() {
                for (v, s, e) in &summary.failures {
                    eprintln!("failed: {v} seed {s}: {e}");
                }
                bail!("{} ablation sub-run(s) failed", summary.failures.len());
            }
        }
        Command::Plot { run, dir } => {
            let target = match dir {
                Some(d) => RunDir::new(d),
                None => resolve(&run)?.2,
            };
            for p in plot_run(&target)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
