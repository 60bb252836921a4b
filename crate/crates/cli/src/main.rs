use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use entroseg::ablation::{ablate, AblationGrid, ABLATION_FILE};
use entroseg::evaluate::{evaluate, write_report, EvalSplit, GroupBy};
use entroseg::gradcheck::run_all;
use entroseg::segnet::{forward, load_checkpoint};
use entroseg::synthvol::{build_dataset, Category, DatasetConfig, Dataset, Scatter, MANIFEST_NAME};
use entroseg::trainer::{train, RunConfig, EPOCH_LOG_FILE};
use entroseg::uncertainty::{entropy, export_entropy_slices, gambling_softmax, SliceAxis};
use entroseg::uncl::{BetaMode, EntropyMode};
use entroseg::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_IO: u8 = 3;

/// Semi-supervised lesion segmentation toolkit: synthetic data, mean-teacher
/// training with uncertainty-aware consistency and focal contrastive losses,
/// ablation sweeps, evaluation and gradient checks.
#[derive(Parser)]
#[command(name = "entroseg", version)]
struct Cli {
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData(GenArgs),
    /// Train one mean-teacher run.
    Train(TrainArgs),
    /// Run an ablation grid described by a JSON file.
    Ablate(AblateArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run every finite-difference gradient suite.
    Gradcheck(GradArgs),
    /// Write per-slice entropy CSVs for one volume.
    ExportMaps(ExportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Dataset config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_volumes: Option<usize>,
    /// Cubic volume side.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    labeled_ratio: Option<f64>,
    #[arg(long)]
    val_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of small, medium, large.
    #[arg(long, value_delimiter = ',')]
    category: Option<Vec<String>>,
    /// Comma-separated subset of scattered, non-scattered.
    #[arg(long, value_delimiter = ',')]
    scatter: Option<Vec<String>>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iters_per_epoch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    /// none, adaptive, or a fixed value such as 0.5.
    #[arg(long)]
    beta: Option<String>,
    /// dual, student_only or teacher_only.
    #[arg(long)]
    entropy_mode: Option<String>,
    #[arg(long)]
    use_uncl: Option<bool>,
    #[arg(long)]
    use_fecl: Option<bool>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Grid JSON: {"base": RunConfig, "axes": [{"field", "values"}], "seeds": [..]}.
    #[arg(long)]
    grid: PathBuf,
    /// Overrides the base output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint base path, e.g. runs/x/student_best.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// category or scatter.
    #[arg(long)]
    group_by: Option<String>,
    /// Evaluate every volume instead of the validation split.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Volume id from the manifest, or its index.
    #[arg(long)]
    volume: String,
    /// H, W or D.
    #[arg(long, default_value = "d")]
    axis: String,
    /// Apply the gambling softmax at this temperature before the entropy.
    #[arg(long)]
    gambling_temperature: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Json { .. } | Error::CorruptFile { .. } | Error::Format { .. } => EXIT_IO,
        Error::Parameter(_) | Error::Config(_) => EXIT_USAGE,
        Error::Contract(_) | Error::Generation(_) | Error::Diverged(_) => EXIT_RUNTIME,
    }
}

fn refuse_clobber(path: &Path, overwrite: bool) -> entroseg::Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: io::Error::new(io::ErrorKind::AlreadyExists, "exists; pass --overwrite to replace"),
        });
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> entroseg::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> entroseg::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn parse_beta(s: &str) -> entroseg::Result<BetaMode> {
    match s {
        "none" => Ok(BetaMode::None),
        "adaptive" => Ok(BetaMode::Adaptive),
        v => v
            .parse::<f64>()
            .map(BetaMode::Fixed)
            .map_err(|_| Error::Parameter(format!("beta must be none, adaptive or a number, got {v}"))),
    }
}

fn parse_entropy_mode(s: &str) -> entroseg::Result<EntropyMode> {
    serde_json::from_value(Value::String(s.into()))
        .map_err(|_| Error::Parameter(format!("entropy mode must be dual, student_only or teacher_only, got {s}")))
}

fn gen_data(a: GenArgs) -> entroseg::Result<Value> {
    let mut cfg: DatasetConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => DatasetConfig::default(),
    };
    if let Some(v) = a.n_volumes {
        cfg.n_volumes = v;
    }
    if let Some(v) = a.size {
        cfg.size = [v; 3];
    }
    if let Some(v) = a.labeled_ratio {
        cfg.labeled_ratio = v;
    }
    if let Some(v) = a.val_ratio {
        cfg.val_ratio = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = &a.category {
        cfg.categories = Some(v.iter().map(|s| Category::parse(s)).collect::<entroseg::Result<_>>()?);
    }
    if let Some(v) = &a.scatter {
        cfg.scatter = Some(v.iter().map(|s| Scatter::parse(s)).collect::<entroseg::Result<_>>()?);
    }
    refuse_clobber(&a.out.join(MANIFEST_NAME), a.overwrite)?;
    let manifest = build_dataset(&cfg, &a.out, a.overwrite)?;
    write_json(&a.out.join("gen_config.json"), &cfg)?;
    Ok(json!({
        "manifest": a.out.join(MANIFEST_NAME),
        "volumes": manifest.volumes.len(),
        "labeled": manifest.split.n_labeled,
        "unlabeled": manifest.split.n_unlabeled,
        "val": manifest.split.n_val,
    }))
}

fn run_train(a: TrainArgs) -> entroseg::Result<Value> {
    let mut cfg: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.manifest {
        cfg.manifest = v;
    }
    if let Some(v) = a.out {
        cfg.output_dir = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.iters_per_epoch {
        cfg.iters_per_epoch = Some(v);
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.eta {
        cfg.eta = v;
    }
    if let Some(v) = &a.beta {
        cfg.beta_mode = parse_beta(v)?;
    }
    if let Some(v) = &a.entropy_mode {
        cfg.entropy_mode = parse_entropy_mode(v)?;
    }
    if let Some(v) = a.use_uncl {
        cfg.use_uncl = v;
    }
    if let Some(v) = a.use_fecl {
        cfg.use_fecl = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = a.top_k {
        cfg.top_k = v;
    }
    cfg.validate()?;
    refuse_clobber(&cfg.output_dir.join(EPOCH_LOG_FILE), a.overwrite)?;
    let out = train(&cfg)?;
    let last = out.epochs.last().expect("at least one epoch");
    Ok(json!({
        "output_dir": cfg.output_dir,
        "epochs": out.epochs.len(),
        "final_val_dice": last.val_dice,
        "final_val_iou": last.val_iou,
        "final_val_hd95": last.val_hd95,
        "final_val_asd": last.val_asd,
        "best_epoch": out.best_epoch,
        "best_val_dice": out.best_val_dice,
    }))
}

fn run_ablate(a: AblateArgs) -> entroseg::Result<Value> {
    let mut grid: AblationGrid = read_json(&a.grid)?;
    if let Some(out) = a.out {
        grid.base.output_dir = out;
    }
    let root = grid.base.output_dir.clone();
    refuse_clobber(&root.join(ABLATION_FILE), a.overwrite)?;
    grid.cells()?;
    write_json(&root.join("resolved_grid.json"), &grid)?;
    let result = ablate(&grid)?;
    Ok(json!({
        "output_dir": root,
        "runs": result.rows.len(),
        "summary": result.summary.iter().map(|c| json!({
            "label": c.label,
            "seeds": c.seeds,
            "dice": c.mean.dice,
            "iou": c.mean.iou,
            "hd95": c.mean.hd95,
            "asd": c.mean.asd,
        })).collect::<Vec<_>>(),
    }))
}

fn run_eval(a: EvalArgs) -> entroseg::Result<Value> {
    let group_by = a.group_by.as_deref().map(GroupBy::parse).transpose()?;
    refuse_clobber(&a.out.join("metrics.csv"), a.overwrite)?;
    let split = if a.all { EvalSplit::All } else { EvalSplit::Val };
    let report = evaluate(&a.checkpoint, &a.manifest, split, group_by)?;
    write_report(&report, &a.out)?;
    write_json(
        &a.out.join("eval_config.json"),
        &json!({
            "checkpoint": a.checkpoint,
            "manifest": a.manifest,
            "group_by": group_by,
            "split": split,
        }),
    )?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(json!({
        "volumes": report.per_volume.len(),
        "overall": report.overall,
        "groups": report.groups,
        "warnings": report.warnings,
    }))
}

fn run_gradcheck(a: GradArgs, quiet: bool) -> entroseg::Result<(Value, bool)> {
    let reports = run_all(a.seed)?;
    if !quiet {
        for r in &reports {
            println!(
                "{:<24} max_rel_err {:.3e}  tol {:.0e}  {}",
                r.name,
                r.max_rel_err,
                r.tolerance,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
    }
    let ok = reports.iter().all(|r| r.passed());
    let summary = if quiet { json!({ "passed": ok, "suites": reports }) } else { Value::Null };
    Ok((summary, ok))
}

fn run_export(a: ExportArgs) -> entroseg::Result<Value> {
    let axis = SliceAxis::parse(&a.axis)?;
    let (params, _) = load_checkpoint(&a.checkpoint)?;
    let data = Dataset::load(&a.manifest)?;
    let index = match data.manifest.volumes.iter().position(|v| v.id == a.volume) {
        Some(i) => i,
        None => a
            .volume
            .parse::<usize>()
            .ok()
            .filter(|&i| i < data.images.len())
            .ok_or_else(|| Error::Parameter(format!("no volume {} in the manifest", a.volume)))?,
    };
    refuse_clobber(&a.out, a.overwrite)?;
    let p = forward(&params, &data.images[index], false)?.probs;
    let p = match a.gambling_temperature {
        Some(t) => gambling_softmax(&p, t)?,
        None => p,
    };
    if a.overwrite && a.out.exists() {
        fs::remove_dir_all(&a.out).map_err(|e| Error::Io {
            path: a.out.clone(),
            source: e,
        })?;
    }
    let files = export_entropy_slices(&entropy(&p), axis, &a.out)?;
    write_json(
        &a.out.join("export_config.json"),
        &json!({
            "checkpoint": a.checkpoint,
            "manifest": a.manifest,
            "volume": data.manifest.volumes[index].id,
            "axis": a.axis,
            "gambling_temperature": a.gambling_temperature,
        }),
    )?;
    Ok(json!({ "volume": data.manifest.volumes[index].id, "files": files.len() }))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let json_out = cli.json;
    let result = match cli.command {
        Command::GenData(a) => gen_data(a).map(|v| (v, true)),
        Command::Train(a) => run_train(a).map(|v| (v, true)),
        Command::Ablate(a) => run_ablate(a).map(|v| (v, true)),
        Command::Eval(a) => run_eval(a).map(|v| (v, true)),
        Command::Gradcheck(a) => run_gradcheck(a, json_out),
        Command::ExportMaps(a) => run_export(a).map(|v| (v, true)),
    };
    match result {
        Ok((summary, ok)) => {
            if json_out {
                println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            } else if !summary.is_null() {
                eprintln!("{summary}");
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
