use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dpcodec::models::{DecoderKind, Preset};
use dpcodec::samplers::SamplerKind;
use dpcodec::training::Phase;

#[derive(Debug, Parser)]
#[command(name = "dpcodec", version, about = "Learned image codec with standard and diffusion decoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write seeded synthetic training/evaluation images.
    GenData(GenDataArgs),
    /// Train the codec (base phase) or its diffusion decoder.
    Train(TrainArgs),
    /// Compress an image to a .dpc bitstream.
    Encode(EncodeArgs),
    /// Reconstruct an image from a .dpc bitstream.
    Decode(DecodeArgs),
    /// Evaluate every decoder configuration and write a CSV.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// 1 writes PGM, 3 writes PPM.
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_phase)]
    pub phase: Phase,
    /// Quality preset of a fresh model (default 1).
    #[arg(long)]
    pub qp: Option<u8>,
    #[arg(long, default_value = "desk", value_parser = parse_preset)]
    pub preset: Preset,
    /// Directory of PGM/PPM training images.
    #[arg(long)]
    pub data: PathBuf,
    /// Start from this model instead of a fresh one.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the step budget.
    #[arg(long)]
    pub steps: Option<usize>,
    /// key=value file overriding architecture, schedule and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Inline key=value override; may repeat and wins over --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Loss trace CSV (default: the model path with a .csv extension).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    pub image: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SamplerArgs {
    #[arg(long, value_parser = parse_sampler)]
    pub sampler: Option<SamplerKind>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    pub bitstream: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "standard", value_parser = parse_decoder)]
    pub decoder: DecoderKind,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Directory holding one model per quality preset, named qp<N>.dpm.
    #[arg(long)]
    pub models: PathBuf,
    /// Directory of PGM/PPM evaluation images.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub qp: Vec<u8>,
    /// Sampler list such as ddim:10,ddpm:100; defaults to the four standard
    /// configurations scaled to the model's horizon.
    #[arg(long, value_delimiter = ',')]
    pub samplers: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write every reconstruction here.
    #[arg(long)]
    pub recon_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    s.parse().map_err(|e: dpcodec::Error| e.to_string())
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: dpcodec::Error| e.to_string())
}

fn parse_sampler(s: &str) -> Result<SamplerKind, String> {
    s.parse().map_err(|e: dpcodec::Error| e.to_string())
}

fn parse_decoder(s: &str) -> Result<DecoderKind, String> {
    s.parse().map_err(|e: dpcodec::Error| e.to_string())
}
