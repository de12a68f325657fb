//! `detkit` command line: evaluation, simulation, sweeps, gradient gates,
//! and toy-detector training.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use detkit::checkpoint::save_checkpoint;
use detkit::gates;
use detkit::persist;
use detkit::report;
use detkit_core::confidence::{fuse_batch, FusionConfig, FusionMode};
use detkit_core::evalmap::{evaluate, iou_truth, scatter_rows};
use detkit_core::nms::{nms, NmsConfig};
use detkit_core::simgen::{generate, mismatch_demo, run_pipeline, SimConfig};
use detkit_core::toydet::{ablation_suite, train, TrainConfig};

/// Environment variable consulted when `--seed` is not given.
const SEED_ENV: &str = "DETKIT_SEED";

#[derive(Parser)]
#[command(
    name = "detkit",
    version,
    about = "IoU-aware detection toolkit: confidence fusion, NMS, COCO-style AP, simulation, and a toy trainable detector",
    after_help = "Seeds resolve in the order: --seed flag, DETKIT_SEED environment variable, config file, built-in default.\n\n\
        CSV headers:\n  \
        scatter:  confidence,iou_eval,iou_truth,category_id\n  \
        sweep:    alpha,ap,ap50,ap60,ap70,ap75,ap80,ap90\n  \
        ablation: seed,variant,best_alpha,ap,ap50,ap60,ap70,ap75,ap80,ap90"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Rank detections by classification score only.
    ScoreOnly,
    /// Fuse score with the predicted IoU (the IoU-aware mechanism).
    Predicted,
    /// Fuse score with the ground-truth IoU (upper-bound analysis).
    GroundTruth,
}

impl From<ModeArg> for FusionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ScoreOnly => FusionMode::ScoreOnly,
            ModeArg::Predicted => FusionMode::FusedPredictedIou,
            ModeArg::GroundTruth => FusionMode::FusedGroundTruthIou,
        }
    }
}

#[derive(Args)]
struct FusionArgs {
    /// Fusion exponent: confidence = score^alpha * iou^(1-alpha).
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Which IoU feeds the detection confidence.
    #[arg(long, value_enum, default_value_t = ModeArg::Predicted)]
    mode: ModeArg,
    /// NMS overlap threshold (suppression requires IoU strictly above it).
    #[arg(long = "nms-iou", default_value_t = 0.5)]
    nms_iou: f64,
}

impl FusionArgs {
    fn fusion(&self) -> Result<FusionConfig> {
        if !(0.0..=1.0).contains(&self.alpha) {
            bail!("--alpha must lie in [0, 1], got {}", self.alpha);
        }
        Ok(FusionConfig { alpha: self.alpha, mode: self.mode.into() })
    }

    fn nms(&self) -> Result<NmsConfig> {
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            bail!("--nms-iou must lie in (0, 1), got {}", self.nms_iou);
        }
        Ok(NmsConfig { iou_threshold: self.nms_iou, max_kept: None })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a detection file against annotations.
    Eval {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[command(flatten)]
        fusion: FusionArgs,
        /// Write a confidence,iou_eval,iou_truth,category_id CSV of the
        /// post-NMS detections.
        #[arg(long)]
        scatter: Option<PathBuf>,
    },
    /// Generate a synthetic scene and run the fuse-NMS-evaluate pipeline.
    Simulate {
        /// Simulation config JSON; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scene seed (overrides config and DETKIT_SEED).
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        fusion: FusionArgs,
        /// Report JSON destination.
        #[arg(long)]
        out: PathBuf,
        /// Also export the scene's ground truths as an annotation file.
        #[arg(long)]
        dump_annotations: Option<PathBuf>,
        /// Also export the scene's detections as a detection file.
        #[arg(long)]
        dump_detections: Option<PathBuf>,
    },
    /// Evaluate a seeded simulation over a list of fusion exponents.
    Sweep {
        /// Comma-separated exponents, e.g. 1.0,0.9,0.8,0.7,0.6,0.5,0.4,0.3.
        #[arg(long, default_value = "1.0,0.9,0.8,0.7,0.6,0.5,0.4,0.3")]
        alphas: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Which IoU feeds the fused confidence during the sweep.
        #[arg(long, value_enum, default_value_t = ModeArg::Predicted)]
        mode: ModeArg,
        #[arg(long = "nms-iou", default_value_t = 0.5)]
        nms_iou: f64,
        /// CSV destination (one row per alpha).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient gates; nonzero exit on failure.
    GradCheck {
        /// Restrict to one module.
        #[arg(long, value_enum)]
        module: Option<ModuleArg>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the toy detector ablation (baseline / flag OFF / flag ON).
    TrainToy {
        /// Training config JSON; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
        /// Fusion exponents swept when picking each variant's best alpha.
        #[arg(long, default_value = "1.0,0.9,0.8,0.7,0.6,0.5,0.4,0.3")]
        alphas: String,
        /// Ablation table CSV destination.
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-run checkpoints and epoch-metric CSVs.
        #[arg(long)]
        artifacts_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModuleArg {
    Losses,
    Geometry,
    Toydet,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(text) => Ok(Some(text.parse().with_context(|| {
            format!("{SEED_ENV} must be an unsigned integer, got {text:?}")
        })?)),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>, config_seed: u64) -> Result<u64> {
    Ok(flag.or(env_seed()?).unwrap_or(config_seed))
}

fn parse_alphas(text: &str) -> Result<Vec<f64>> {
    let alphas: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad alpha {s:?}")))
        .collect::<Result<_>>()?;
    if alphas.is_empty() {
        bail!("alpha list is empty");
    }
    for a in &alphas {
        if !(0.0..=1.0).contains(a) {
            bail!("alpha {a} outside [0, 1]");
        }
    }
    Ok(alphas)
}

fn load_config_or_default<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> Result<T> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("malformed config {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn main() -> ExitCode {
    // Die quietly when stdout is a closed pipe (e.g. `detkit sweep | head`).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Eval { annotations, detections, fusion, scatter } => {
            cmd_eval(&annotations, &detections, &fusion, scatter.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { config, seed, fusion, out, dump_annotations, dump_detections } => {
            cmd_simulate(
                &config,
                seed,
                &fusion,
                &out,
                dump_annotations.as_deref(),
                dump_detections.as_deref(),
            )?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { alphas, config, seed, mode, nms_iou, out } => {
            cmd_sweep(&alphas, &config, seed, mode, nms_iou, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::GradCheck { module, seed } => cmd_grad_check(module, seed),
        Command::TrainToy { config, seeds, alphas, out, artifacts_dir } => {
            cmd_train_toy(&config, &seeds, &alphas, &out, artifacts_dir.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn cmd_eval(
    annotations: &Path,
    detections: &Path,
    fusion_args: &FusionArgs,
    scatter: Option<&Path>,
) -> Result<()> {
    let gts = persist::load_annotations(annotations)?;
    let dets = persist::load_detections(detections)?;
    let fusion = fusion_args.fusion()?;
    let lookup: Option<Vec<f64>> = match fusion.mode {
        FusionMode::FusedGroundTruthIou => {
            Some(dets.iter().map(|d| iou_truth(d, &gts)).collect())
        }
        _ => None,
    };
    let fused = fuse_batch(&dets, &fusion, lookup.as_deref())
        .context("fusing detection confidences")?;
    let kept = nms(&fused, &fusion_args.nms()?);
    let report = evaluate(&kept, &gts);
    println!(
        "{} detections ({} after NMS), {} ground truths",
        dets.len(),
        kept.len(),
        gts.len()
    );
    println!("{}", report::report_line(&report));
    if let Some(path) = scatter {
        report::write_scatter_csv(path, &scatter_rows(&kept, &gts))?;
        println!("scatter written to {}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct SimulationReport {
    config: SimConfig,
    fusion: FusionConfig,
    nms: NmsConfig,
    report: detkit_core::EvalReport,
    mismatch: detkit_core::MismatchReport,
}

fn cmd_simulate(
    config: &Option<PathBuf>,
    seed: Option<u64>,
    fusion_args: &FusionArgs,
    out: &Path,
    dump_annotations: Option<&Path>,
    dump_detections: Option<&Path>,
) -> Result<()> {
    let mut sim: SimConfig = load_config_or_default(config)?;
    sim.seed = resolve_seed(seed, sim.seed)?;
    let fusion = fusion_args.fusion()?;
    let nms_cfg = fusion_args.nms()?;

    let scene = generate(&sim).context("generating scene")?;
    let report = run_pipeline(&scene, &fusion, &nms_cfg).context("running pipeline")?;
    // The flip count compares score ranking against a fused ranking, so a
    // fused config is always used here.
    let mismatch_fusion = match fusion.mode {
        FusionMode::ScoreOnly => FusionConfig { alpha: 0.5, mode: FusionMode::FusedPredictedIou },
        _ => fusion,
    };
    let mismatch = mismatch_demo(&scene, &mismatch_fusion, &nms_cfg)?;

    println!(
        "seed {}: {} ground truths, {} detections",
        sim.seed,
        scene.gts.len(),
        scene.dets.len()
    );
    println!("{}", report::report_line(&report));
    println!(
        "suppression flips: {} of {} conflicting pairs",
        mismatch.flips, mismatch.pairs_considered
    );

    if let Some(path) = dump_annotations {
        persist::save_annotations(&path, &scene.gts, (sim.canvas_size, sim.canvas_size))?;
    }
    if let Some(path) = dump_detections {
        persist::save_detections(&path, &scene.dets)?;
    }
    persist::write_json_atomic(
        out,
        &SimulationReport { config: sim, fusion, nms: nms_cfg, report, mismatch },
    )?;
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_sweep(
    alphas: &str,
    config: &Option<PathBuf>,
    seed: Option<u64>,
    mode: ModeArg,
    nms_iou: f64,
    out: &Path,
) -> Result<()> {
    let alphas = parse_alphas(alphas)?;
    let mut sim: SimConfig = load_config_or_default(config)?;
    sim.seed = resolve_seed(seed, sim.seed)?;
    if mode == ModeArg::ScoreOnly {
        bail!("--mode score-only has no alpha dependence; sweep needs a fused mode");
    }
    let nms_cfg = NmsConfig { iou_threshold: nms_iou, max_kept: None };
    let scene = generate(&sim)?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in &alphas {
        let fusion = FusionConfig { alpha, mode: mode.into() };
        let report = run_pipeline(&scene, &fusion, &nms_cfg)?;
        println!("alpha {alpha:>4}: {}", report::report_line(&report));
        rows.push((alpha, report));
    }
    report::write_sweep_csv(out, &rows)?;
    println!("sweep written to {}", out.display());
    Ok(())
}

fn cmd_grad_check(module: Option<ModuleArg>, seed: Option<u64>) -> Result<ExitCode> {
    let seed = resolve_seed(seed, 17)?;
    let results = match module {
        None => gates::all_gates(seed),
        Some(ModuleArg::Geometry) => gates::geometry_gates(seed),
        Some(ModuleArg::Losses) => gates::losses_gates(seed),
        Some(ModuleArg::Toydet) => gates::toydet_gates(seed),
    };
    let mut all_passed = true;
    for gate in &results {
        let status = if gate.passed { "ok  " } else { "FAIL" };
        println!("{status} {:<38} {}", gate.name, gate.detail);
        all_passed &= gate.passed;
    }
    Ok(if all_passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_train_toy(
    config: &Option<PathBuf>,
    seeds: &str,
    alphas: &str,
    out: &Path,
    artifacts_dir: Option<&Path>,
) -> Result<()> {
    let base: TrainConfig = load_config_or_default(config)?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed {s:?}")))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        bail!("seed list is empty");
    }
    let alphas = parse_alphas(alphas)?;

    let table = ablation_suite(&base, &seeds, &alphas)
        .map_err(|e| anyhow::anyhow!("ablation failed: {e}"))?;
    for row in &table.rows {
        println!(
            "seed {:>3} {:<18} alpha {:>4}: {}",
            row.seed,
            row.variant.label(),
            row.best_alpha,
            report::report_line(&row.report)
        );
    }
    print!("{}", report::ablation_summary(&table));
    report::write_ablation_csv(out, &table)?;
    println!("ablation table written to {}", out.display());

    if let Some(dir) = artifacts_dir {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))?;
        for row in &table.rows {
            let mut cfg = base.clone();
            cfg.seed = row.seed;
            match row.variant {
                detkit_core::toydet::AblationVariant::Baseline => {
                    cfg.train_iou_head = false;
                    cfg.propagate_target_iou_gradient = false;
                }
                detkit_core::toydet::AblationVariant::IouHeadDetached => {
                    cfg.propagate_target_iou_gradient = false;
                }
                detkit_core::toydet::AblationVariant::IouHeadPropagated => {
                    cfg.propagate_target_iou_gradient = true;
                }
            }
            let output = train(&cfg).map_err(|e| anyhow::anyhow!("training failed: {e}"))?;
            let stem = format!("seed{}_{}", row.seed, row.variant.label());
            save_checkpoint(&dir.join(format!("{stem}.ckpt.json")), &output.params, &cfg)?;
            let mut curve = String::from("epoch,mean_loss,ap,ap50,ap90\n");
            for m in &output.metrics {
                use std::fmt::Write as _;
                let _ = writeln!(
                    curve,
                    "{},{},{},{},{}",
                    m.epoch, m.mean_loss, m.eval.ap, m.eval.ap50, m.eval.ap90
                );
            }
            persist::write_atomic(&dir.join(format!("{stem}_epochs.csv")), curve.as_bytes())?;
        }
        println!("artifacts written to {}", dir.display());
    }
    Ok(())
}
