use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bonekin::config::{load_config, Config};
use bonekin::dataset::{read_dataset, read_records, write_dataset, write_records, VideoRecord};
use bonekin::metrics::MetricReport;
use bonekin::pipeline::{
    evaluate, gradient_suite, predict_all, run_ablation, train, Model, SuiteDims, Toggle, TrainOptions, TrainState,
};
use bonekin::sequence::PoseSequence;
use bonekin::skeleton::{SkeletonPreset, SkeletonTopology};
use bonekin::synth::{generate_dataset, split_by_actor, GeneratorConfig};
use bonekin::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bonekin", version, about = "3D human pose estimation from 2D keypoint sequences")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources, lowest precedence first: defaults, `--config`,
/// `--set`, then the named flags.
#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set lr=0.0005`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Training seed (`data_seed` for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Direction-branch receptive field d.
    #[arg(long, global = true)]
    frames: Option<usize>,
    #[arg(long, global = true)]
    subnets: Option<usize>,
    #[arg(long, global = true, value_parser = ["random", "causal-random", "firstframe", "consecutive"])]
    strategy: Option<String>,
    #[arg(long, global = true)]
    causal: bool,
    #[arg(long, global = true)]
    no_vis_fusion: bool,
    #[arg(long, global = true)]
    no_augment: bool,
    #[arg(long, global = true)]
    no_attention: bool,
    #[arg(long, global = true, value_parser = ["analytic", "heads"])]
    composition: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training actors of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint, log and effective config.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint with its stored configuration.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Total epochs when resuming.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print metrics of a checkpoint or of a prediction file.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "val", value_parser = ["val", "all"])]
        split: String,
        /// Include per-frame errors in the report.
        #[arg(long)]
        per_frame: bool,
    },
    /// Write predicted poses in the dataset format.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val", value_parser = ["val", "all"])]
        split: String,
    },
    /// Finite-difference check of every kernel and both networks.
    Gradcheck {
        #[arg(long, default_value = "tiny", value_parser = ["tiny", "small"])]
        dims: String,
    },
    /// Train the full model and ablated variants over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "sampling,decomposition,augmentation,vis-fusion")]
        toggles: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn overrides(common: &Common, gen_data: bool) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        out.push((k.trim().to_string(), v.to_string()));
    }
    let mut push = |k: &str, v: String| out.push((k.to_string(), v));
    if let Some(s) = common.seed {
        push(if gen_data { "data_seed" } else { "seed" }, s.to_string());
    }
    if let Some(d) = common.frames {
        push("d", d.to_string());
    }
    if let Some(n) = common.subnets {
        push("subnets", n.to_string());
    }
    if let Some(s) = &common.strategy {
        push("strategy", format!("\"{s}\""));
    }
    if common.causal {
        push("causal", "true".into());
    }
    if common.no_vis_fusion {
        push("vis_fusion", "false".into());
    }
    if common.no_augment {
        push("augment", "false".into());
    }
    if common.no_attention {
        push("attention", "false".into());
    }
    if let Some(c) = &common.composition {
        push("composition", format!("\"{c}\""));
    }
    Ok(out)
}

fn effective_config(common: &Common, gen_data: bool) -> Result<Config, Failure> {
    let cfg = load_config(common.config.as_deref(), &overrides(common, gen_data)?)?;
    echo(&cfg)?;
    Ok(cfg)
}

fn echo(cfg: &Config) -> Outcome {
    eprintln!("effective config: {}", serde_json::to_string(cfg)?);
    Ok(())
}

fn topology(cfg: &Config) -> Result<SkeletonTopology, Failure> {
    Ok(SkeletonPreset::by_name(&cfg.skeleton)?.topology)
}

fn select(videos: Vec<PoseSequence>, cfg: &Config, split: &str) -> Vec<PoseSequence> {
    if split == "all" {
        videos
    } else {
        split_by_actor(videos, cfg.val_actors).1
    }
}

fn print_report(mut report: MetricReport, per_frame: bool) -> Outcome {
    if !per_frame {
        report.per_frame_errors.clear();
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn gen_data(common: &Common, out: &Path) -> Outcome {
    let cfg = effective_config(common, true)?;
    let gen = GeneratorConfig::from_config(&cfg)?;
    let videos = generate_dataset(&gen)?;
    write_dataset(&videos, &gen.preset.topology, out)?;
    let frames: usize = videos.iter().map(PoseSequence::frames).sum();
    eprintln!("wrote {} videos, {frames} frames to {}", videos.len(), out.display());
    Ok(())
}

fn train_cmd(common: &Common, data: &Path, out: &Path, resume: Option<&Path>, epochs: Option<usize>) -> Outcome {
    let (mut model, mut state) = match resume {
        Some(dir) => {
            let (mut model, state) = Model::load(dir)?;
            if let Some(e) = epochs {
                model.cfg.epochs = e;
            }
            echo(&model.cfg)?;
            (model, state)
        }
        None => {
            let mut cfg = effective_config(common, false)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            (Model::new(&cfg)?, TrainState::default())
        }
    };
    let videos = read_dataset(data, &model.topo)?;
    let (train_videos, val_videos) = split_by_actor(videos, model.cfg.val_actors);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&model.cfg)?)?;
    let opts = TrainOptions {
        checkpoint: Some(out.join("checkpoint")),
        log: Some(out.join("train_log.jsonl")),
        validate: !val_videos.is_empty(),
    };
    train(&mut model, &mut state, &train_videos, &val_videos, &opts)?;
    for log in &state.history {
        eprintln!("{}", serde_json::to_string(log)?);
    }
    if val_videos.is_empty() {
        return Ok(());
    }
    print_report(evaluate(&model, &val_videos)?, false)
}

fn eval_cmd(
    common: &Common,
    data: &Path,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    split: &str,
    per_frame: bool,
) -> Outcome {
    if let Some(dir) = checkpoint {
        let (model, _) = Model::load(dir)?;
        echo(&model.cfg)?;
        let videos = select(read_dataset(data, &model.topo)?, &model.cfg, split);
        return print_report(evaluate(&model, &videos)?, per_frame);
    }
    let path = predictions.ok_or_else(|| Failure::Usage("eval needs --checkpoint or --predictions".into()))?;
    let cfg = effective_config(common, false)?;
    let topo = topology(&cfg)?;
    let videos = select(read_dataset(data, &topo)?, &cfg, split);
    let preds: Vec<VideoRecord> = read_records(path, &topo)?.into_iter().map(|(_, r)| r).collect();
    if preds.len() != videos.len() {
        return Err(Failure::Runtime(format!("{} predicted videos for {} ground-truth videos", preds.len(), videos.len())));
    }
    for (p, v) in preds.iter().zip(&videos) {
        if p.actor_id != v.actor_id || p.frames != v.frames() {
            return Err(Failure::Runtime(format!(
                "prediction `{}` ({} frames) does not match video `{}` ({} frames)",
                p.actor_id,
                p.frames,
                v.actor_id,
                v.frames()
            )));
        }
    }
    let pairs: Vec<_> = preds.iter().zip(&videos).map(|(p, v)| (&p.poses3d[..], &v.poses3d[..])).collect();
    print_report(MetricReport::from_sequences(&pairs)?, per_frame)
}

fn predict_cmd(data: &Path, checkpoint: &Path, out: &Path, split: &str) -> Outcome {
    let (model, _) = Model::load(checkpoint)?;
    echo(&model.cfg)?;
    let videos = select(read_dataset(data, &model.topo)?, &model.cfg, split);
    let preds = predict_all(&model, &videos)?;
    let records: Vec<VideoRecord> = preds
        .into_iter()
        .zip(&videos)
        .map(|(p, v)| VideoRecord::prediction(&v.actor_id, [v.camera.width, v.camera.height], p.poses, &model.topo))
        .collect();
    write_records(&records, out)?;
    eprintln!("wrote {} predicted videos to {}", records.len(), out.display());
    Ok(())
}

fn gradcheck_cmd(dims: &str) -> Outcome {
    let dims = SuiteDims::parse(dims).ok_or_else(|| Failure::Usage(format!("unknown --dims `{dims}`")))?;
    let entries = gradient_suite(dims)?;
    let mut worst: f64 = 0.0;
    for e in &entries {
        println!(
            "{:<28} max rel error {:.3e}  tolerance {:.0e}  {}  ({})",
            e.name,
            e.max_rel_error,
            e.tolerance,
            if e.passed() { "ok" } else { "FAIL" },
            e.worst.as_deref().unwrap_or("-")
        );
        worst = worst.max(e.max_rel_error);
    }
    println!("worst relative error {worst:.3e}");
    if entries.iter().all(|e| e.passed()) {
        Ok(())
    } else {
        Err(Failure::Runtime("finite-difference check failed".into()))
    }
}

fn ablate_cmd(common: &Common, data: &Path, toggles: &[String], seeds: &[u64]) -> Outcome {
    let cfg = effective_config(common, false)?;
    let toggles = toggles
        .iter()
        .map(|t| Toggle::parse(t).ok_or_else(|| Failure::Usage(format!("unknown toggle `{t}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    let videos = read_dataset(data, &topology(&cfg)?)?;
    let (train_videos, val_videos) = split_by_actor(videos, cfg.val_actors);
    let report = run_ablation(&cfg, &toggles, seeds, &train_videos, &val_videos, |row| {
        eprintln!(
            "seed {} {:<14} full {:.2} mm  ablated {:.2} mm  delta {:+.2} mm",
            row.seed,
            row.toggle.name(),
            row.full_mm,
            row.ablated_mm,
            row.delta_mm
        );
    })?;
    println!("{:<14} {:>10} {:>12} {:>12}", "toggle", "full mm", "ablated mm", "delta mm");
    for s in &report.summary {
        println!("{:<14} {:>10.2} {:>12.2} {:>+12.2}", s.toggle.name(), s.median_full_mm, s.median_ablated_mm, s.median_delta_mm);
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    let c = &cli.common;
    match &cli.command {
        Command::GenData { out } => gen_data(c, out),
        Command::Train { data, out, checkpoint, epochs } => train_cmd(c, data, out, checkpoint.as_deref(), *epochs),
        Command::Eval { data, checkpoint, predictions, split, per_frame } => {
            eval_cmd(c, data, checkpoint.as_deref(), predictions.as_deref(), split, *per_frame)
        }
        Command::Predict { data, checkpoint, out, split } => predict_cmd(data, checkpoint, out, split),
        Command::Gradcheck { dims } => gradcheck_cmd(dims),
        Command::Ablate { data, toggles, seeds } => ablate_cmd(c, data, toggles, seeds),
    }
}

fn main() -> ExitCode {
    bonekin::runtime::retain_freed_memory();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
