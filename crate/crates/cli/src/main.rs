//! `tryon-lab`: generate synthetic data, train, evaluate, and run ablation grids.

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use std::path::PathBuf;
use std::process::ExitCode;
use tryon_core::dataset::{generate_synthetic, SynthSpec, Split};
use tryon_core::harness::{evaluate, latest_checkpoint, run_grid, ExperimentConfig, GridOutcome, HarnessError, Trainer};

const DATA_ENV: &str = "TRYON_LAB_DATA";

#[derive(Parser)]
#[command(name = "tryon-lab", version, about = "Video virtual try-on ablation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key = value experiment config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root (overrides `dataset` and the TRYON_LAB_DATA variable).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with exact pose, dense-pose, garment-mask and flow annotations.
    Generate {
        /// Dataset root (defaults to TRYON_LAB_DATA, then ./data).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        videos: usize,
        /// Videos in the held-out test split (0 to skip it).
        #[arg(long, default_value_t = 4)]
        test_videos: usize,
        #[arg(long, default_value_t = 24)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 48)]
        width: usize,
    },
    /// Train one configuration.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a split and write report.json, report.csv and plots.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to the latest checkpoint under the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the config's eval_split.
        #[arg(long)]
        split: Option<Split>,
    },
    /// One-factor-at-a-time ablation grid around the config.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Axis as `key=v1,v2,...`; repeatable.
        #[arg(long = "axis", value_name = "KEY=V1,V2")]
        axes: Vec<String>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::default();
    if let Ok(root) = std::env::var(DATA_ENV) {
        cfg.dataset = PathBuf::from(root);
    }
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for o in &common.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| HarnessError::Config(format!("override `{o}` is not key=value")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(d) = &common.dataset {
        cfg.dataset = d.clone();
    }
    Ok(cfg)
}

fn parse_axis(spec: &str) -> Result<(String, Vec<String>), HarnessError> {
    let (k, vs) = spec.split_once('=').ok_or_else(|| HarnessError::Config(format!("axis `{spec}` is not key=v1,v2")))?;
    Ok((k.trim().to_string(), vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect()))
}

fn generate(out: Option<PathBuf>, seed: u64, videos: usize, test_videos: usize, frames: usize, h: usize, w: usize) -> Result<Value, HarnessError> {
    let root = out
        .or_else(|| std::env::var(DATA_ENV).ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    let mut splits = vec![];
    let train = generate_synthetic(&root, &SynthSpec::new(videos, frames, h, w, seed, Split::Train))?;
    splits.push(json!({"split": "train", "videos": train.videos.len(), "frames": train.total_frames()}));
    if test_videos > 0 {
        let test = generate_synthetic(&root, &SynthSpec::new(test_videos, frames, h, w, seed.wrapping_add(1_000_003), Split::Test))?;
        splits.push(json!({"split": "test", "videos": test.videos.len(), "frames": test.total_frames()}));
    }
    Ok(json!({"command": "generate", "root": root, "splits": splits}))
}

fn train_cmd(common: &Common, resume: Option<PathBuf>) -> Result<Value, HarnessError> {
    let mut trainer = match resume {
        Some(ckpt) => Trainer::<f32>::resume(&ckpt, common.out.clone())?,
        None => Trainer::<f32>::new(load_config(common)?)?,
    };
    let state = trainer.run()?.clone();
    let last = state.history.last().map(|r| r.losses.total);
    Ok(json!({
        "command": "train",
        "out_dir": trainer.cfg.out_dir,
        "steps": state.step,
        "epochs_completed": state.epoch,
        "final_total_loss": last,
        "epochs": state.epochs,
        "checkpoint": latest_checkpoint(&trainer.cfg.out_dir),
    }))
}

fn evaluate_cmd(common: &Common, checkpoint: Option<PathBuf>, split: Option<Split>) -> Result<Value, HarnessError> {
    let cfg = load_config(common)?;
    let ckpt = match checkpoint {
        Some(c) => c,
        None => latest_checkpoint(&cfg.out_dir)
            .ok_or_else(|| HarnessError::Config(format!("no checkpoint under {}", cfg.out_dir.display())))?,
    };
    let split = split.unwrap_or(cfg.eval_split);
    let report = evaluate::<f32>(&ckpt, &cfg.dataset, split, &cfg.out_dir)?;
    Ok(json!({
        "command": "evaluate",
        "checkpoint": ckpt,
        "split": split,
        "frames": report.per_frame.len(),
        "overall": report.overall,
        "report": cfg.out_dir.join("report.json"),
    }))
}

fn grid_cmd(common: &Common, axes: &[String]) -> Result<Value, HarnessError> {
    let cfg = load_config(common)?;
    let axes = axes.iter().map(|a| parse_axis(a)).collect::<Result<Vec<_>, _>>()?;
    let report = run_grid::<f32>(&cfg, &axes)?;
    let cells: Vec<Value> = report
        .cells
        .iter()
        .map(|(cell, outcome)| match outcome {
            GridOutcome::Completed(r) => json!({"cell": cell.name, "status": "ok", "overall": r.overall}),
            GridOutcome::Failed { kind, message } => json!({"cell": cell.name, "status": "failed", "error": kind, "message": message}),
        })
        .collect();
    Ok(json!({"command": "grid", "summary": cfg.out_dir.join("grid_summary.csv"), "cells": cells}))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let err = json!({"error": "usage", "message": e.render().to_string().trim_end()});
            println!("{}", serde_json::to_string_pretty(&err).unwrap());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Generate { out, seed, videos, test_videos, frames, height, width } => {
            generate(out, seed, videos, test_videos, frames, height, width)
        }
        Command::Train { common, resume } => train_cmd(&common, resume),
        Command::Evaluate { common, checkpoint, split } => evaluate_cmd(&common, checkpoint, split),
        Command::Grid { common, axes } => grid_cmd(&common, &axes),
    };
    match result {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let mut err = json!({"error": e.kind(), "message": e.to_string()});
            if let HarnessError::Io { path, .. } = &e {
                err["path"] = json!(path);
            }
            println!("{}", serde_json::to_string_pretty(&err).unwrap());
            ExitCode::FAILURE
        }
    }
}
