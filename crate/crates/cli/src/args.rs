use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sparkattn::AccMode;

#[derive(Parser, Debug)]
#[command(name = "sparkattn", version, about = "Simulate fused m8n8k4 attention and check it against a binary64 reference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run forward kernels and print a JSON report.
    Forward(ForwardArgs),
    /// Run the fused backward (FP16-ACC) and print a JSON report.
    Backward(BackwardArgs),
    /// Run a grid of forward configurations and print CSV.
    Sweep(SweepArgs),
    /// Write a random workload (q, k, v, do) as SPAT files.
    Gen(GenArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Shape {
    /// Sequence length N.
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    /// Head dimension d.
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
}

#[derive(Args, Debug, Clone)]
pub struct RunOpts {
    /// Workload and dropout seed.
    #[arg(long, env = "SPARKATTN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub causal: bool,
    /// Dropout probability.
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f32,
    /// Query tile rows (default min(64, N)).
    #[arg(long)]
    pub br: Option<usize>,
    /// Key tile columns (default min(64, N)).
    #[arg(long)]
    pub bc: Option<usize>,
    /// Compare against the binary64 reference; exit 3 if a tolerance is missed.
    #[arg(long)]
    pub verify: bool,
    /// Include wall-clock time (makes reports non-reproducible).
    #[arg(long)]
    pub timing: bool,
    /// Read q.spat, k.spat, v.spat (and do.spat) from this directory instead
    /// of generating inputs; shape flags are taken from the files.
    #[arg(long, value_name = "DIR")]
    pub inputs: Option<PathBuf>,
    /// Write the report here instead of standard output.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ForwardArgs {
    #[command(flatten)]
    pub shape: Shape,
    #[command(flatten)]
    pub run: RunOpts,
    /// Accumulation modes to run.
    #[arg(long, value_delimiter = ',', default_value = "fp32")]
    pub acc: Vec<AccMode>,
    /// Registered forward kernels to run.
    #[arg(long, value_delimiter = ',', default_value = "fused")]
    pub kernels: Vec<String>,
    /// Write o.spat and lse.spat of the first run to this directory.
    #[arg(long, value_name = "DIR")]
    pub save: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BackwardArgs {
    #[command(flatten)]
    pub shape: Shape,
    #[command(flatten)]
    pub run: RunOpts,
    #[arg(long, default_value = "fp16")]
    pub acc: AccMode,
    /// Write dq.spat, dk.spat and dv.spat to this directory.
    #[arg(long, value_name = "DIR")]
    pub save: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    Off,
    On,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    pub n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64,128")]
    pub d: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "off")]
    pub causal: Vec<Toggle>,
    #[arg(long, value_delimiter = ',', default_value = "fp16,fp32")]
    pub acc: Vec<AccMode>,
    #[arg(long, value_delimiter = ',', default_value = "fused")]
    pub kernels: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, env = "SPARKATTN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f32,
    /// Fill the error columns from the binary64 reference.
    #[arg(long)]
    pub verify: bool,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub shape: Shape,
    #[arg(long, env = "SPARKATTN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}
