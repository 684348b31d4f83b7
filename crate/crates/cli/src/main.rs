//! `dyncon` — batch front end for the dynamic-connectome prediction pipeline.
//!
//! One JSON config file plus flag overrides; precedence is flags > file >
//! defaults. `CLK_SEED` is the global seed fallback when neither a flag nor
//! the config sets one.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dyncon_core::connectome::sliding_window_connectomes;
use dyncon_core::distance::distance_series;
use dyncon_core::io::{generate_synthetic_cohort, load_cohort, save_cohort, Cohort, SyntheticSpec};
use dyncon_core::model::{
    load_checkpoint, preprocess_cohort, save_checkpoint, ModelState, PipelineConfig,
    PreppedSubject,
};
use dyncon_core::train::{
    evaluate, run_ablation, split_cohort, train_model, ConfigDelta, default_ablation_grid,
    SplitPlan, TrainConfig,
};
use dyncon_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dyncon", about = "Dynamic-connectome severity prediction pipeline")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config file and the CLK_SEED env var.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-subject stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Validate the configuration, print the resolved values and exit.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (manifest + per-subject CSVs).
    Synth(SynthArgs),
    /// Compute per-subject distance series files from a cohort manifest.
    Distances(DistancesArgs),
    /// Train over every repeat of the split plan and write reports.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on a cohort.
    Eval(EvalArgs),
    /// Run the ablation grid and write CSV/JSON tables.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    normal: Option<usize>,
    #[arg(long)]
    mci: Option<usize>,
    #[arg(long)]
    imp: Option<usize>,
    #[arg(long)]
    rois: Option<usize>,
    #[arg(long)]
    timepoints: Option<usize>,
}

#[derive(Args)]
struct DistancesArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Where the best-validation checkpoint and reports go.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Outlier weight for the loss.
    #[arg(long)]
    weight: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional JSON report destination.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated cell names, e.g. Default,LL6,AH4,TP500,NoRevRIN,W10.
    #[arg(long)]
    cells: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

/// Pipeline fields exposed as flag overrides.
#[derive(Args, Clone)]
struct PipelineFlags {
    #[arg(long)]
    window_length: Option<usize>,
    #[arg(long)]
    window_stride: Option<usize>,
    #[arg(long)]
    patch_length: Option<usize>,
    #[arg(long)]
    patch_stride: Option<usize>,
    #[arg(long)]
    prototypes: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, value_parser = clap::builder::BoolishValueParser::new())]
    revrin: Option<bool>,
}

impl PipelineFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(v) = self.window_length {
            cfg.window_length = v;
        }
        if let Some(v) = self.window_stride {
            cfg.window_stride = v;
        }
        if let Some(v) = self.patch_length {
            cfg.patch.patch_length = v;
        }
        if let Some(v) = self.patch_stride {
            cfg.patch.stride = v;
        }
        if let Some(v) = self.prototypes {
            cfg.n_prototypes = v;
        }
        if let Some(v) = self.heads {
            cfg.attn_heads = v;
        }
        if let Some(v) = self.revrin {
            cfg.revrin = v;
        }
    }
}

/// Whole-run configuration; every section is optional and falls back to the
/// built-in defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    pipeline: Option<PipelineConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
    #[serde(default)]
    split: Option<SplitPlan>,
    #[serde(default)]
    synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    ablation_cells: Option<Vec<String>>,
    #[serde(default)]
    seed: Option<u64>,
}

/// Fully-resolved configuration after merging defaults, file and flags.
#[derive(Serialize)]
struct Resolved {
    pipeline: PipelineConfig,
    train: TrainConfig,
    split: SplitPlan,
    synthetic: SyntheticSpec,
    ablation_cells: Vec<String>,
    seed: u64,
}

fn env_seed() -> Option<u64> {
    std::env::var("CLK_SEED").ok().and_then(|s| s.parse().ok())
}

fn resolve(cli: &Cli) -> Result<Resolved> {
    let file: RunConfig = match &cli.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    let seed = cli
        .seed
        .or(file.seed)
        .or_else(env_seed)
        .unwrap_or(42);
    let had_train = file.train.is_some();
    let had_split = file.split.is_some();
    let had_synth = file.synthetic.is_some();
    let mut train = file.train.unwrap_or_default();
    let mut split = file.split.unwrap_or_default();
    let mut synthetic = file.synthetic.unwrap_or_default();
    // The global seed threads into every seeded stage unless the config file
    // pinned those seeds itself.
    if cli.seed.is_some() || !had_train {
        train.seed = seed;
    }
    if cli.seed.is_some() || !had_split {
        split.seed = seed;
    }
    if cli.seed.is_some() || !had_synth {
        synthetic.seed = seed;
    }
    let cells = file
        .ablation_cells
        .unwrap_or_else(|| default_ablation_grid().iter().map(|d| d.name()).collect());
    Ok(Resolved {
        pipeline: file.pipeline.unwrap_or_default(),
        train,
        split,
        synthetic,
        ablation_cells: cells,
        seed,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn dry_run_print(resolved: &Resolved) -> Result<()> {
    resolved.pipeline.validate()?;
    resolved.split.validate()?;
    resolved.train.ow_mse.validate()?;
    println!("{}", serde_json::to_string_pretty(resolved)?);
    Ok(())
}

fn cmd_synth(args: &SynthArgs, resolved: &Resolved) -> Result<()> {
    let mut spec = resolved.synthetic.clone();
    if let Some(v) = args.normal {
        spec.n_normal = v;
    }
    if let Some(v) = args.mci {
        spec.n_mci = v;
    }
    if let Some(v) = args.imp {
        spec.n_imp = v;
    }
    if let Some(v) = args.rois {
        spec.n_rois = v;
    }
    if let Some(v) = args.timepoints {
        spec.n_timepoints = v;
    }
    let cohort = generate_synthetic_cohort(&spec)?;
    let manifest = save_cohort(&cohort, &args.out)?;
    println!("wrote {} subjects to {}", cohort.len(), manifest.display());
    Ok(())
}

fn cmd_distances(args: &DistancesArgs, resolved: &Resolved) -> Result<()> {
    let mut cfg = resolved.pipeline.clone();
    args.pipeline.apply(&mut cfg);
    cfg.validate()?;
    let cohort = load_cohort(&args.manifest)?;
    std::fs::create_dir_all(&args.out)?;
    let results: Vec<Result<String>> = cohort
        .records
        .par_iter()
        .map(|record| {
            let seq = sliding_window_connectomes(record, cfg.window_length, cfg.window_stride)?;
            let series = distance_series(&seq, &cfg.metrics, cfg.wasserstein_p)?;
            let path = args.out.join(format!("{}.json", record.subject_id));
            std::fs::write(&path, serde_json::to_string_pretty(&series.to_json())?)?;
            Ok(record.subject_id.clone())
        })
        .collect();
    let mut ids = Vec::with_capacity(results.len());
    for r in results {
        ids.push(r?);
    }
    write_json(&args.out.join("index.json"), &serde_json::json!({ "subjects": ids }))?;
    println!("wrote distance series for {} subjects to {}", cohort.len(), args.out.display());
    Ok(())
}

fn load_and_prep(manifest: &Path, cfg: &PipelineConfig) -> Result<(Cohort, Vec<PreppedSubject>)> {
    let cohort = load_cohort(manifest)?;
    let prepped = preprocess_cohort(&cohort, cfg)?;
    Ok((cohort, prepped))
}

fn cmd_train(args: &TrainArgs, resolved: &Resolved) -> Result<()> {
    let mut pipeline = resolved.pipeline.clone();
    args.pipeline.apply(&mut pipeline);
    let mut train_cfg = resolved.train.clone();
    if let Some(v) = args.epochs {
        train_cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        train_cfg.adam.learning_rate = v;
    }
    if let Some(v) = args.weight {
        train_cfg.ow_mse.weight = v;
    }
    if let Some(v) = args.tau {
        train_cfg.ow_mse.tau = v;
    }
    let mut plan = resolved.split;
    if let Some(v) = args.repeats {
        plan.n_repeats = v;
    }
    pipeline.validate()?;
    train_cfg.ow_mse.validate()?;
    plan.validate()?;

    let (_, prepped) = load_and_prep(&args.manifest, &pipeline)?;
    let diagnoses: Vec<_> = prepped.iter().map(|p| p.diagnosis).collect();
    let steps = prepped
        .first()
        .map(|p| p.series.n_steps())
        .ok_or_else(|| Error::Train("empty cohort".into()))?;
    let n_features = prepped[0].series.n_features();

    let mut repeats = Vec::with_capacity(plan.n_repeats);
    let mut best: Option<(f64, ModelState)> = None;
    for repeat in 0..plan.n_repeats {
        let split = split_cohort(&diagnoses, &plan, repeat)?;
        let mut model = ModelState::init(
            &pipeline,
            n_features,
            steps,
            train_cfg.seed.wrapping_add(repeat as u64 * 1009),
        )?;
        let history = train_model(&mut model, &prepped, &split, &train_cfg)?;
        let test_set: Vec<&PreppedSubject> = split.test.iter().map(|&i| &prepped[i]).collect();
        let test = evaluate(&model, &test_set)?;
        let best_val = history.val_loss[history.best_epoch];
        println!(
            "repeat {repeat}: best val loss {best_val:.6} at epoch {}, test MAE {:.4}",
            history.best_epoch, test.mae_overall
        );
        if best.as_ref().map_or(true, |(v, _)| best_val < *v) {
            best = Some((best_val, model.clone()));
        }
        repeats.push(dyncon_core::train::RepeatResult { repeat, history, test });
    }
    let report = summarize_repeats(&repeats);
    write_json(&args.out.join("report.json"), &report)?;

    let (_, model) = best.expect("n_repeats >= 1");
    let revrin_states = prepped
        .iter()
        .filter_map(|p| p.revrin.clone().map(|s| (p.subject_id.clone(), s)))
        .collect();
    save_checkpoint(&model, &revrin_states, &args.out.join("checkpoint"))?;
    println!("normal   MAE: {}", report.mae_normal_summary);
    println!("impaired MAE: {}", report.mae_impaired_summary);
    println!("overall  MAE: {}", report.mae_overall_summary);
    Ok(())
}

fn summarize_repeats(
    repeats: &[dyncon_core::train::RepeatResult],
) -> dyncon_core::train::ExperimentReport {
    use dyncon_core::train::{format_mean_std, ExperimentReport};
    let collect = |f: &dyn Fn(&dyncon_core::train::Evaluation) -> Option<f64>| -> Vec<f64> {
        repeats.iter().filter_map(|r| f(&r.test)).collect()
    };
    ExperimentReport {
        mae_normal_summary: format_mean_std(&collect(&|e| e.mae_normal)),
        mae_impaired_summary: format_mean_std(&collect(&|e| e.mae_impaired)),
        mae_overall_summary: format_mean_std(&collect(&|e| Some(e.mae_overall))),
        repeats: repeats.to_vec(),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let cohort = load_cohort(&args.manifest)?;
    let prepped = preprocess_cohort(&cohort, &model.cfg)?;
    let all: Vec<&PreppedSubject> = prepped.iter().collect();
    let eval = evaluate(&model, &all)?;
    match eval.mae_normal {
        Some(v) => println!("normal   MAE: {v:.4}"),
        None => println!("normal   MAE: -"),
    }
    match eval.mae_impaired {
        Some(v) => println!("impaired MAE: {v:.4}"),
        None => println!("impaired MAE: -"),
    }
    println!("overall  MAE: {:.4}", eval.mae_overall);
    if let Some(out) = &args.out {
        write_json(out, &eval)?;
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs, resolved: &Resolved) -> Result<()> {
    let mut pipeline = resolved.pipeline.clone();
    args.pipeline.apply(&mut pipeline);
    let mut train_cfg = resolved.train.clone();
    if let Some(v) = args.epochs {
        train_cfg.epochs = v;
    }
    let mut plan = resolved.split;
    if let Some(v) = args.repeats {
        plan.n_repeats = v;
    }
    let names: Vec<String> = match &args.cells {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => resolved.ablation_cells.clone(),
    };
    let grid: Result<Vec<ConfigDelta>> = names.iter().map(|n| ConfigDelta::parse(n)).collect();
    let grid = grid?;
    pipeline.validate()?;
    let cohort = load_cohort(&args.manifest)?;
    let report = run_ablation(&cohort, &pipeline, &train_cfg, &plan, &grid)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("ablation.csv"), report.to_csv())?;
    write_json(&args.out.join("ablation.json"), &report)?;
    for (cell, groups) in &report.summaries {
        for (group, summary) in groups {
            println!("{cell}\t{group}\t{summary}");
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Train("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Train(format!("thread pool: {e}")))?;
    }
    let resolved = resolve(cli)?;
    if cli.dry_run {
        return dry_run_print(&resolved);
    }
    match &cli.command {
        Command::Synth(args) => cmd_synth(args, &resolved),
        Command::Distances(args) => cmd_distances(args, &resolved),
        Command::Train(args) => cmd_train(args, &resolved),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args, &resolved),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Display strings already lead with the module name.
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
