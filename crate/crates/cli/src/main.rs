use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use asp_vision::nn::Shape;
use asp_vision_cli::config::{DatasetKind, ExperimentConfig, Pipeline, Snr, SweepMode};
use asp_vision_cli::experiments;
use clap::{Args, Parser, Subcommand};

/// Simulate angle-sensitive-pixel capture and run the CNN experiments.
///
/// Every subcommand reads an optional JSON config (`--config`); flags
/// override its values. Outputs go to `--out`, including the effective
/// config as `config.json`. Exit status is 1 when any trial failed and 2 on
/// other errors.
#[derive(Parser, Debug)]
#[command(name = "asp-vision", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset root (default: $ASP_DATA_ROOT, then ./data).
    #[arg(long, global = true, env = "ASP_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    dataset: Option<DatasetArg>,
    /// Use only the first N training images.
    #[arg(long, global = true)]
    train_limit: Option<usize>,
    /// Use only the first N test images.
    #[arg(long, global = true)]
    test_limit: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    momentum: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
    /// Filter bank file written by gen-filters.
    #[arg(long, global = true)]
    bank: Option<PathBuf>,
    /// Kernel side length of the generated bank.
    #[arg(long, global = true)]
    kernel_size: Option<usize>,
    /// Angular extent of the kernel in radians.
    #[arg(long, global = true)]
    extent: Option<f64>,
    /// Gaussian envelope sigma in radians.
    #[arg(long, global = true)]
    sigma: Option<f64>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum DatasetArg {
    Mnist,
    Cifar10,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Random,
    Grid,
    Default,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the filter bank (binary and CSV) and its frequency coverage.
    GenFilters,
    /// Simulate one capture of an image file or a test-set image.
    Capture {
        /// PNG or PGM scene; otherwise a test-set image is used.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Test-set index when no image is given.
        #[arg(long)]
        index: Option<usize>,
        /// Scene SNR in dB (`inf` for none).
        #[arg(long)]
        snr: Option<Snr>,
        /// Quantize to this many ADC bits.
        #[arg(long)]
        quantize: Option<u32>,
        /// Keep only fully overlapping outputs instead of zero padding.
        #[arg(long)]
        valid: bool,
    },
    /// Train and evaluate baseline and frozen-ASP LeNets.
    TrainEval {
        #[arg(long)]
        trials: Option<usize>,
        /// Training fraction of a per-trial random split (e.g. 0.85).
        #[arg(long)]
        split: Option<f64>,
        /// Comma-separated subset of `baseline,asp`.
        #[arg(long, value_delimiter = ',')]
        pipelines: Option<Vec<String>>,
        #[arg(long)]
        baseline_filters: Option<usize>,
    },
    /// Accuracy versus scene SNR.
    NoiseSweep {
        /// Comma-separated SNR grid in dB; `inf` for no noise.
        #[arg(long, value_delimiter = ',')]
        snr: Option<Vec<Snr>>,
        /// Evaluate clean-trained models instead of training per SNR.
        #[arg(long)]
        clean_train: bool,
        #[arg(long, value_delimiter = ',')]
        pipelines: Option<Vec<String>>,
    },
    /// Frozen-bank accuracy across filter parameters.
    ParamSweep {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Random banks, or default-bank trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Filters per random bank.
        #[arg(long)]
        filters: Option<usize>,
        #[arg(long)]
        beta_min: Option<f64>,
        #[arg(long)]
        beta_max: Option<f64>,
        /// Comma-separated β grid.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        /// Comma-separated γ grid in radians.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        gammas: Option<Vec<f64>>,
    },
    /// Per-layer FLOPS and first-layer savings.
    Flops {
        /// `lenet`, `googlenet`, `nin`, `vgg-m-128`, `all`, a comma list,
        /// or a network JSON file.
        #[arg(long)]
        network: Option<String>,
        /// Input shape as CxHxW.
        #[arg(long)]
        input: Option<String>,
    },
    /// Run-length compression of thresholded edge captures.
    Bandwidth {
        /// Number of test-set images.
        #[arg(long)]
        images: Option<usize>,
        /// Image file to capture instead of test-set images (repeatable).
        #[arg(long = "image")]
        image_files: Vec<PathBuf>,
        /// Code energy the threshold must keep.
        #[arg(long)]
        energy: Option<f64>,
        #[arg(long)]
        bits: Option<u32>,
    },
}

fn parse_pipelines(names: &[String]) -> Result<Vec<Pipeline>> {
    names
        .iter()
        .map(|n| match n.trim() {
            "baseline" => Ok(Pipeline::Baseline),
            "asp" => Ok(Pipeline::Asp),
            other => bail!("unknown pipeline `{other}` (expected baseline or asp)"),
        })
        .collect()
}

fn parse_shape(s: &str) -> Result<Shape> {
    let dims: Vec<usize> = s.split(['x', 'X']).map(|d| d.trim().parse()).collect::<Result<_, _>>()?;
    match dims[..] {
        [c, h, w] => Ok(Shape::new(c, h, w)),
        _ => bail!("input shape `{s}` must be CxHxW"),
    }
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    macro_rules! set {
        ($src:expr => $dst:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    set!(c.seed => cfg.seed);
    if let Some(r) = &c.data_root {
        cfg.data_root = Some(r.clone());
    }
    if let Some(d) = c.dataset {
        cfg.dataset = match d {
            DatasetArg::Mnist => DatasetKind::Mnist,
            DatasetArg::Cifar10 => DatasetKind::Cifar10,
        };
    }
    if c.train_limit.is_some() {
        cfg.train_limit = c.train_limit;
    }
    if c.test_limit.is_some() {
        cfg.test_limit = c.test_limit;
    }
    set!(c.epochs => cfg.train.epochs);
    set!(c.lr => cfg.train.learning_rate);
    set!(c.momentum => cfg.train.momentum);
    set!(c.batch_size => cfg.train.batch_size);
    set!(c.weight_decay => cfg.train.weight_decay);
    if c.bank.is_some() {
        cfg.bank.file = c.bank.clone();
    }
    if c.kernel_size.is_some() {
        cfg.bank.kernel_size = c.kernel_size;
    }
    if c.extent.is_some() {
        cfg.bank.extent = c.extent;
    }
    if c.sigma.is_some() {
        cfg.bank.sigma = c.sigma;
    }

    match &cli.command {
        Command::GenFilters => {}
        Command::Capture { image, index, snr, quantize, valid } => {
            if image.is_some() {
                cfg.capture.image = image.clone();
            }
            set!(index => cfg.capture.index);
            if snr.is_some() {
                cfg.capture.snr_db = *snr;
            }
            if quantize.is_some() {
                cfg.capture.quantize = *quantize;
            }
            cfg.capture.valid |= valid;
        }
        Command::TrainEval { trials, split, pipelines, baseline_filters } => {
            set!(trials => cfg.trials);
            if split.is_some() {
                cfg.split = *split;
            }
            if let Some(p) = pipelines {
                cfg.pipelines = parse_pipelines(p)?;
            }
            set!(baseline_filters => cfg.baseline_filters);
        }
        Command::NoiseSweep { snr, clean_train, pipelines } => {
            set!(snr => cfg.noise.snr_db);
            cfg.noise.clean_train |= clean_train;
            if let Some(p) = pipelines {
                cfg.pipelines = parse_pipelines(p)?;
            }
        }
        Command::ParamSweep { mode, trials, filters, beta_min, beta_max, betas, gammas } => {
            if let Some(m) = mode {
                cfg.sweep.mode = match m {
                    ModeArg::Random => SweepMode::Random,
                    ModeArg::Grid => SweepMode::Grid,
                    ModeArg::Default => SweepMode::Default,
                };
            }
            if let Some(t) = trials {
                match cfg.sweep.mode {
                    SweepMode::Default => cfg.trials = *t,
                    _ => cfg.sweep.trials = *t,
                }
            }
            set!(filters => cfg.sweep.filters);
            set!(beta_min => cfg.sweep.beta_range[0]);
            set!(beta_max => cfg.sweep.beta_range[1]);
            set!(betas => cfg.sweep.betas);
            set!(gammas => cfg.sweep.gammas);
        }
        Command::Flops { network, input } => {
            set!(network => cfg.flops.network);
            if let Some(s) = input {
                cfg.flops.input = Some(parse_shape(s)?);
            }
        }
        Command::Bandwidth { images, image_files, energy, bits } => {
            set!(images => cfg.bandwidth.images);
            if !image_files.is_empty() {
                cfg.bandwidth.image_files = image_files.clone();
            }
            set!(energy => cfg.bandwidth.energy);
            set!(bits => cfg.bandwidth.bits);
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<experiments::RunOutcome> {
    let cfg = build_config(cli)?;
    let out = &cli.common.out;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), cfg.to_json() + "\n")?;
    match cli.command {
        Command::GenFilters => experiments::gen_filters(&cfg, out),
        Command::Capture { .. } => experiments::run_capture(&cfg, out),
        Command::TrainEval { .. } => experiments::run_train_eval(&cfg, out),
        Command::NoiseSweep { .. } => experiments::run_noise_sweep(&cfg, out),
        Command::ParamSweep { .. } => experiments::run_param_sweep(&cfg, out),
        Command::Flops { .. } => experiments::run_flops(&cfg, out),
        Command::Bandwidth { .. } => experiments::run_bandwidth(&cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if outcome.failures > 0 {
                eprintln!("{} trial(s) failed", outcome.failures);
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
