//! `idd`: train, run and inspect the dual-pipeline style transfer model.
//!
//! Results go to stdout; diagnostics and progress go to stderr. Exit codes:
//! 0 success, 2 configuration or argument error, 3 dataset error,
//! 4 numeric failure during training, 5 I/O, decode or shape error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "idd",
    version,
    about = "Dual-pipeline color/texture style transfer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum BranchArg {
    Color,
    Texture,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum InputMode {
    /// Guided-filter smoothed content (the inference default).
    #[default]
    Smooth,
    /// Content as loaded.
    Raw,
    /// Smoothed content plus Gaussian noise of `--sigma`.
    SmoothNoise,
}

#[derive(clap::Args, Debug, Clone, Copy)]
pub struct FilterArgs {
    /// Guided filter radius; chosen from the image size when omitted.
    #[arg(long)]
    pub radius: Option<usize>,
    /// Guided filter regularizer.
    #[arg(long)]
    pub eps: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. `--set total_steps=100`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stylize one image with either branch.
    Stylize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        content: PathBuf,
        #[arg(long, value_enum, default_value_t = BranchArg::Color)]
        branch: BranchArg,
        #[arg(long, value_enum, default_value_t = InputMode::Smooth)]
        input_mode: InputMode,
        /// Noise standard deviation, used only with `smooth_noise`.
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Side-by-side grid: content, texture on raw input, color on smooth
    /// input, color on smooth input plus noise.
    Compare {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        content: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Texture-differentiation report over a directory of images.
    Metrics {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        eval_dir: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        filter: FilterArgs,
        /// Where to write the text report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Edge-preserving smoothing of one image.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        radius: usize,
        #[arg(long, default_value_t = 1e-2)]
        eps: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump every generator layer's activations as grayscale grids.
    Features {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        content: PathBuf,
        #[arg(long, value_enum, default_value_t = InputMode::Smooth)]
        input_mode: InputMode,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a procedural training set, held-out set and style image.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        train: usize,
        #[arg(long, default_value_t = 8)]
        eval: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            overrides,
            resume,
        } => commands::train(&config, &overrides, resume.as_deref()),
        Command::Stylize {
            checkpoint,
            content,
            branch,
            input_mode,
            sigma,
            seed,
            filter,
            out,
        } => commands::stylize(
            &checkpoint,
            &content,
            branch,
            input_mode,
            sigma,
            seed,
            filter,
            &out,
        ),
        Command::Compare {
            checkpoint,
            content,
            sigma,
            seed,
            filter,
            out,
        } => commands::compare(&checkpoint, &content, sigma, seed, filter, &out),
        Command::Metrics {
            checkpoint,
            eval_dir,
            sigma,
            seed,
            filter,
            out,
        } => commands::metrics(&checkpoint, &eval_dir, sigma, seed, filter, &out),
        Command::Filter {
            input,
            radius,
            eps,
            out,
        } => commands::filter(&input, radius, eps, &out),
        Command::Features {
            checkpoint,
            content,
            input_mode,
            sigma,
            seed,
            out,
        } => commands::features(&checkpoint, &content, input_mode, sigma, seed, &out),
        Command::SynthData {
            out,
            train,
            eval,
            size,
            seed,
        } => commands::synth_data(&out, train, eval, size, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
