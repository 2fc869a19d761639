use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ctrlfuse_core::model::Ablation;

#[derive(Debug, Parser)]
#[command(name = "ctrlfuse", version, about = "Mask-prompt controllable infrared/visible fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a JSON-lines log.
    Train(TrainArgs),
    /// Fuse one infrared/visible pair.
    Fuse(FuseArgs),
    /// Score fused images over a dataset directory.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse::<Ablation>().map_err(|e| e.to_string())
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if a.is_finite() && a >= 0.0 {
        Ok(a)
    } else {
        Err(format!("alpha must be finite and non-negative, got {s}"))
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`; scenes are generated in memory
    /// when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Scene count when generating in memory.
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, value_parser = parse_ablation, default_value = "none")]
    pub ablation: Ablation,
    /// Checkpoint path; the log goes next to it as `<stem>.log.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub ir: PathBuf,
    #[arg(long)]
    pub vis: PathBuf,
    /// Binary prompt mask PNG. Without it the prompt-free path runs.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, value_parser = parse_alpha, default_value_t = 1.0)]
    pub alpha: f64,
    /// Checkpoint path or id under CTRLFUSE_CKPT_DIR.
    #[arg(long)]
    pub ckpt: Option<String>,
    #[arg(long, value_parser = parse_ablation, default_value = "none")]
    pub ablation: Ablation,
    /// Fused output PNG.
    #[arg(long, default_value = "fused.png")]
    pub out: PathBuf,
    /// Also write `<stem>_m_ir.png`, `<stem>_m_vis.png` and `<stem>_seg.png`.
    #[arg(long)]
    pub masks: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory with `ir/` and `vis/` PNGs sharing file names.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of precomputed fused PNGs with the same names.
    #[arg(long, conflicts_with = "ckpt")]
    pub fused: Option<PathBuf>,
    /// Fuse with this checkpoint instead of reading `--fused`.
    #[arg(long)]
    pub ckpt: Option<String>,
    /// Directory of prompt masks, used with `--ckpt`.
    #[arg(long, requires = "ckpt")]
    pub mask: Option<PathBuf>,
    #[arg(long, value_parser = parse_alpha, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, value_parser = parse_ablation, default_value = "none")]
    pub ablation: Ablation,
    /// Receives `metrics.csv` and `summary.json`.
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seeds per case, starting at 0.
    #[arg(long, default_value_t = ctrlfuse_core::gradsuite::DEFAULT_SEEDS)]
    pub seeds: u64,
    /// Only run cases whose name contains this string.
    #[arg(long)]
    pub filter: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Checkpoint path or id under CTRLFUSE_CKPT_DIR.
    #[arg(long)]
    pub ckpt: Option<String>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}
