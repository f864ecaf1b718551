//! `mitodet`: generate synthetic data, train the cascade, detect, evaluate
//! and render overlays.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, malformed inputs,
//! out-of-range indices), 2 runtime error (I/O, divergence, checkpoint
//! mismatch).

mod commands;
mod render;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mitodet::detections::Stage;

/// An error caused by the caller's input rather than by the run itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(
    name = "mitodet",
    version,
    about = "Cascaded mitosis detection in 4D microscopy volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset and print its manifest path.
    Generate(GenerateArgs),
    /// Train the cascade and write a checkpoint plus a per-batch loss log.
    Train(TrainArgs),
    /// Run the cascade over a dataset and write detections as JSON.
    Detect(DetectArgs),
    /// Score a detections file against a dataset's annotations.
    Eval(EvalArgs),
    /// Burn detection and truth boxes into PNG slice images.
    Render(RenderArgs),
}

/// `LO..HI`, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Range(pub usize, pub usize);

fn parse_range(s: &str) -> Result<Range, String> {
    let (lo, hi) = s
        .split_once("..")
        .ok_or_else(|| format!("expected LO..HI, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let (lo, hi) = (p(lo)?, p(hi)?);
    if lo > hi {
        return Err(format!("empty range {lo}..{hi}"));
    }
    Ok(Range(lo, hi))
}

fn parse_dims(s: &str) -> Result<[usize; 4], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != 4 {
        return Err(format!("expected XxYxZxT, got {s:?}"));
    }
    let mut out = [0; 4];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p
            .trim()
            .parse::<usize>()
            .map_err(|e| format!("{p:?}: {e}"))?;
        if *o == 0 {
            return Err(format!("dimensions must be positive, got {s:?}"));
        }
    }
    Ok(out)
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Volume extents as XxYxZxT.
    #[arg(long, value_parser = parse_dims, default_value = "128x128x12x20")]
    pub dims: [usize; 4],
    /// Number of mitosis events, LO..HI inclusive.
    #[arg(long, value_parser = parse_range, default_value = "1..3")]
    pub events: Range,
    /// Number of normal cells, LO..HI inclusive.
    #[arg(long, value_parser = parse_range, default_value = "20..30")]
    pub normal: Range,
    /// Sensor noise standard deviation (intensities lie in [0, 1]).
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    /// Minimum distance between an event centre and the x/y border, pixels.
    #[arg(long, default_value_t = 16.0)]
    pub border_margin: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset directories.
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    /// Training configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log (CSV); defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Overrides the configured number of batches.
    #[arg(long)]
    pub max_batches: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output detections file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Pipeline stage to export: raw, volume_fused or final.
    #[arg(long, default_value = "final")]
    pub stage: Stage,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detections file (JSON).
    #[arg(long)]
    pub detections: PathBuf,
    /// Dataset directory holding the annotations.
    #[arg(long)]
    pub truth: PathBuf,
    /// IoU needed for a detection to count as a true positive.
    #[arg(long, default_value_t = mitodet::eval::DEFAULT_MATCH_IOU)]
    pub iou: f64,
    /// IoU linking detections on neighbouring slices and frames into events.
    #[arg(long, default_value_t = mitodet::eval::DEFAULT_LINK_IOU)]
    pub link_iou: f64,
    /// Also write the report as JSON to this file.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Detections file (JSON).
    #[arg(long)]
    pub detections: PathBuf,
    /// Output directory for PNG images.
    #[arg(long)]
    pub out: PathBuf,
    /// Frame to render; all frames when omitted.
    #[arg(long)]
    pub t: Option<usize>,
    /// Slice to render; all slices when omitted.
    #[arg(long)]
    pub z: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Render(a) => commands::render(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
