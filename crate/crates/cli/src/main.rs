//! `fear`: synthetic data, training, tracking, evaluation, benchmarking and
//! cost reports for the FEAR tracker.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fear_core::{BBox, FearError};

#[derive(Parser, Debug)]
#[command(name = "fear", version, about = "Train, run and benchmark a FEAR Siamese tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; omitted sections use defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Final feature stride of the network.
    #[arg(long, global = true, value_parser = ["8", "16"])]
    pub stride: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/ and val/ synthetic videos.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a dataset written by `synth`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory with train/ and val/ subdirectories.
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Track every video of a dataset directory.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A video directory or a directory of videos.
        #[arg(long)]
        data: PathBuf,
        /// First-frame box `x_min,y_min,x_max,y_max`; defaults to the first
        /// annotation of each video.
        #[arg(long, value_parser = parse_box)]
        init_box: Option<BBox>,
    },
    /// Score tracking results against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// A results file, or a directory of `<video>.txt` results written
        /// by `track`.
        #[arg(long)]
        results: PathBuf,
        /// Annotation file, video directory or directory of videos.
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the online or offline efficiency protocol.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Protocol::Online)]
        protocol: Protocol,
        /// `efficient`, `inefficient` or `custom:PATH` to a TOML device profile.
        #[arg(long, default_value = "efficient", value_parser = parse_device)]
        device: DeviceArg,
        /// Time a real model instead of the profile's synthetic latency.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Parameter and FLOP counts of the configured model.
    Cost {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Online,
    Offline,
}

#[derive(Debug, Clone)]
pub enum DeviceArg {
    Efficient,
    Inefficient,
    Custom(PathBuf),
}

fn parse_device(s: &str) -> Result<DeviceArg, String> {
    match s {
        "efficient" => Ok(DeviceArg::Efficient),
        "inefficient" => Ok(DeviceArg::Inefficient),
        _ => match s.strip_prefix("custom:") {
            Some(p) if !p.is_empty() => Ok(DeviceArg::Custom(PathBuf::from(p))),
            _ => Err("expected efficient, inefficient or custom:PATH".into()),
        },
    }
}

fn parse_box(s: &str) -> Result<BBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    match v[..] {
        [x0, y0, x1, y1] => Ok(BBox::new(x0, y0, x1, y1)),
        _ => Err("expected four comma-separated numbers".into()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { common } => commands::synth(&common),
        Command::Train { common, data, resume } => commands::train(&common, &data, resume.as_deref()),
        Command::Track {
            common,
            checkpoint,
            data,
            init_box,
        } => commands::track(&common, &checkpoint, &data, init_box),
        Command::Eval { common, results, data } => commands::eval(&common, &results, &data),
        Command::Bench {
            common,
            protocol,
            device,
            checkpoint,
        } => commands::bench(&common, protocol, &device, checkpoint.as_deref()),
        Command::Cost { common } => commands::cost(&common),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let invalid = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<FearError>(), Some(FearError::InvalidConfig { .. })));
    if invalid {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
