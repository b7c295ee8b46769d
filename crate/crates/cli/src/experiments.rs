//! The experiment subcommands. Each run writes its tables under an output
//! directory and reports how many trials failed.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use asp_vision::codec::{self, BandwidthReport};
use asp_vision::data::{self, Dataset, Split};
use asp_vision::flops;
use asp_vision::nn::{
    self, build_lenet, EpochStats, FirstLayer, LayerSpec, Network, NetworkSpec, Samples, Shape, Tensor,
};
use asp_vision::optics::{self, AspParams, FilterBank, TileConfig};
use asp_vision::par;
use asp_vision::sensor::{self, Border, CaptureSettings, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DatasetKind, ExperimentConfig, Pipeline, Snr, SweepMode};
use crate::imageio;

/// Files written by a run and the number of trials that errored.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub failures: usize,
}

/// Kernel size of the LeNet first layer.
pub const LENET_KERNEL: usize = 5;
/// Kernel size for captures outside LeNet experiments.
pub const SENSOR_KERNEL: usize = 7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of trial `trial` under master seed `master`. Shared by every
/// subcommand, so trial 0 of different experiments trains identically.
pub fn trial_seed(master: u64, trial: u64) -> u64 {
    splitmix64(master ^ splitmix64(trial))
}

fn noise_seed(trial: u64, snr: f64, split: u64, index: usize) -> u64 {
    splitmix64(trial ^ splitmix64(snr.to_bits() ^ splitmix64(split ^ splitmix64(index as u64))))
}

/// Writes a CSV whose first line carries the config fingerprint.
pub fn write_csv(path: &Path, fingerprint: &str, header: &str, rows: &[String]) -> Result<()> {
    let mut text = format!("# config-fingerprint: {fingerprint}\n{header}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn csv_escape(msg: &str) -> String {
    msg.replace([',', '\n', '"'], ";")
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
}

fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Dataset> {
    let dir = cfg.dataset_dir();
    let d = match cfg.dataset {
        DatasetKind::Mnist => data::load_mnist_dir(&dir, split),
        DatasetKind::Cifar10 => data::load_cifar10(&dir, split),
    }
    .with_context(|| {
        format!("loading {:?} from {} (set {} or data_root)", cfg.dataset, dir.display(), crate::config::DATA_ROOT_ENV)
    })?;
    let limit = match split {
        Split::Train => cfg.train_limit,
        Split::Test => cfg.test_limit,
    };
    Ok(limit.map_or(d.clone(), |n| d.subset(n)))
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Data> {
    Ok(Data { train: load_split(cfg, Split::Train)?, test: load_split(cfg, Split::Test)? })
}

/// The bank used as the frozen first layer: the configured file, or the
/// default tile sampled with `default_size` taps.
pub fn experiment_bank(cfg: &ExperimentConfig, default_size: usize) -> Result<FilterBank> {
    match &cfg.bank.file {
        Some(path) => {
            let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            Ok(optics::read_filter_bank(std::io::BufReader::new(f))?)
        }
        None => Ok(optics::make_filter_bank(&optics::default_tile(), cfg.bank.geometry(default_size))?),
    }
}

pub fn pipeline_spec(
    cfg: &ExperimentConfig,
    pipeline: Pipeline,
    bank: &FilterBank,
    input: Shape,
    classes: usize,
) -> Result<NetworkSpec> {
    let first = match pipeline {
        Pipeline::Baseline => FirstLayer::Trainable(cfg.baseline_filters),
        Pipeline::Asp => FirstLayer::Frozen(bank),
    };
    Ok(build_lenet(first, input, classes)?)
}

fn input_shape(d: &Dataset) -> Shape {
    let (h, w) = d.image_size();
    Shape::new(1, h, w)
}

/// One training run: returns test accuracy, the model and its history.
fn train_once(
    spec: &NetworkSpec,
    train: &Samples,
    eval: &Samples,
    cfg: &ExperimentConfig,
    seed: u64,
    track: bool,
) -> Result<(f64, Network, Vec<EpochStats>)> {
    let tc = nn::TrainConfig { seed, ..cfg.train };
    let (net, history) = nn::train(spec, train, &tc, track.then_some(eval))?;
    let acc = nn::evaluate(&net, eval)?;
    Ok((acc, net, history))
}

pub const TRAIN_EVAL_HEADER: &str = "trial,seed,baseline_acc,baseline_std,asp_acc,asp_std,status";

/// Trains each selected pipeline for every trial. Without `split`, models
/// train on the training set and are scored on the test set; with it, each
/// trial draws its own random split of the training set and scores the
/// validation part. The last row holds mean and sample standard deviation.
pub fn run_train_eval(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let data = load_data(cfg)?;
    let bank = experiment_bank(cfg, LENET_KERNEL)?;
    let input = input_shape(&data.train);
    let fp = cfg.fingerprint();
    let mut outcome = RunOutcome::default();
    let mut rows = Vec::new();
    let mut history_rows = Vec::new();
    let mut accs: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut last_models: Vec<(Pipeline, Network)> = Vec::new();
    let full = (data.train.to_samples(), data.test.to_samples());
    for trial in 0..cfg.trials {
        let seed = trial_seed(cfg.seed, trial as u64);
        let split_sets;
        let (train, eval) = match cfg.split {
            Some(f) => {
                let (a, b) = data.train.split(f, seed);
                split_sets = (a.to_samples(), b.to_samples());
                (&split_sets.0, &split_sets.1)
            }
            None => (&full.0, &full.1),
        };
        let mut cells: [Option<f64>; 2] = [None, None];
        let mut status = Vec::new();
        for &p in &cfg.pipelines {
            let result = pipeline_spec(cfg, p, &bank, input, data.train.n_classes)
                .and_then(|spec| train_once(&spec, train, eval, cfg, seed, true));
            match result {
                Ok((acc, net, history)) => {
                    eprintln!("train-eval trial {trial} {}: accuracy {acc:.4}", p.name());
                    cells[p as usize] = Some(acc);
                    accs[p as usize].push(acc);
                    history_rows.extend(history.iter().map(|h| {
                        format!(
                            "{},{trial},{},{:.6},{:.6},{}",
                            p.name(),
                            h.epoch,
                            h.loss,
                            h.train_accuracy,
                            fmt_opt(h.val_accuracy)
                        )
                    }));
                    last_models.retain(|(q, _)| *q != p);
                    last_models.push((p, net));
                }
                Err(e) => {
                    eprintln!("train-eval trial {trial} {}: {e:#}", p.name());
                    status.push(format!("{} error: {}", p.name(), csv_escape(&format!("{e:#}"))));
                }
            }
        }
        if !status.is_empty() {
            outcome.failures += 1;
        }
        let status = if status.is_empty() { "ok".to_string() } else { status.join(" | ") };
        rows.push(format!("{trial},{seed},{},,{},,{status}", fmt_opt(cells[0]), fmt_opt(cells[1])));
    }
    let cell = |v: &Vec<f64>| {
        if v.is_empty() {
            (String::new(), String::new())
        } else {
            let (m, s) = mean_std(v);
            (format!("{m:.6}"), format!("{s:.6}"))
        }
    };
    let (bm, bs) = cell(&accs[0]);
    let (am, as_) = cell(&accs[1]);
    rows.push(format!("summary,,{bm},{bs},{am},{as_},{} of {} trials ok", cfg.trials - outcome.failures, cfg.trials));

    let csv = out.join("train_eval.csv");
    write_csv(&csv, &fp, TRAIN_EVAL_HEADER, &rows)?;
    let hist = out.join("history.csv");
    write_csv(&hist, &fp, "pipeline,trial,epoch,loss,train_acc,val_acc", &history_rows)?;
    outcome.files.extend([csv, hist]);
    for (p, net) in last_models {
        let path = out.join(format!("model_{}.aspm", p.name()));
        let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        net.save(std::io::BufWriter::new(f))?;
        outcome.files.push(path);
    }
    Ok(outcome)
}

/// Adds scene-domain noise to every image at `snr`; `+inf` leaves the
/// data unchanged.
pub fn noisy_samples(d: &Dataset, snr: Snr, trial: u64, split: u64) -> Result<Samples> {
    let Some(db) = snr.as_option() else {
        return Ok(d.to_samples());
    };
    let indexed: Vec<(usize, &Image)> = d.images.iter().enumerate().collect();
    let noisy = par::map_slice(&indexed, |(i, img)| sensor::add_noise(img, db, noise_seed(trial, db, split, *i)));
    let (h, w) = d.image_size();
    let mut values = Vec::with_capacity(d.len() * h * w);
    for img in noisy {
        values.extend_from_slice(img?.values());
    }
    Ok(Samples { inputs: Tensor::new(vec![d.len(), 1, h, w], values)?, labels: d.labels.clone() })
}

pub const NOISE_HEADER: &str = "snr_db,baseline_acc,asp_acc,status";

/// Accuracy of each pipeline versus scene SNR. By default every SNR gets
/// its own models, trained and tested at that SNR; with `clean_train` one
/// clean-trained model per pipeline is tested at every SNR.
pub fn run_noise_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let data = load_data(cfg)?;
    let bank = experiment_bank(cfg, LENET_KERNEL)?;
    let input = input_shape(&data.train);
    let seed = trial_seed(cfg.seed, 0);
    let mut outcome = RunOutcome::default();
    let specs = cfg
        .pipelines
        .iter()
        .map(|&p| Ok((p, pipeline_spec(cfg, p, &bank, input, data.train.n_classes)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut clean_models: Vec<(Pipeline, std::result::Result<Network, String>)> = Vec::new();
    if cfg.noise.clean_train {
        let train = data.train.to_samples();
        for (p, spec) in &specs {
            let tc = nn::TrainConfig { seed, ..cfg.train };
            let net = nn::train(spec, &train, &tc, None).map(|(n, _)| n).map_err(|e| e.to_string());
            clean_models.push((*p, net));
        }
    }

    let mut rows = Vec::new();
    for &snr in &cfg.noise.snr_db {
        let mut cells: [Option<f64>; 2] = [None, None];
        let mut status = Vec::new();
        let test = noisy_samples(&data.test, snr, seed, 1)?;
        let train = if cfg.noise.clean_train { None } else { Some(noisy_samples(&data.train, snr, seed, 0)?) };
        for (p, spec) in &specs {
            let result = match &train {
                Some(train) => {
                    train_once(spec, train, &test, cfg, seed, false).map(|r| r.0).map_err(|e| format!("{e:#}"))
                }
                None => {
                    let net = &clean_models.iter().find(|(q, _)| q == p).expect("trained above").1;
                    net.as_ref().map_err(Clone::clone).and_then(|n| nn::evaluate(n, &test).map_err(|e| e.to_string()))
                }
            };
            match result {
                Ok(acc) => {
                    eprintln!("noise-sweep {snr} dB {}: accuracy {acc:.4}", p.name());
                    cells[*p as usize] = Some(acc);
                }
                Err(e) => {
                    eprintln!("noise-sweep {snr} dB {}: {e}", p.name());
                    status.push(format!("{} error: {}", p.name(), csv_escape(&e)));
                }
            }
        }
        if !status.is_empty() {
            outcome.failures += 1;
        }
        let status = if status.is_empty() { "ok".to_string() } else { status.join(" | ") };
        rows.push(format!("{snr},{},{},{status}", fmt_opt(cells[0]), fmt_opt(cells[1])));
    }
    let csv = out.join("noise_sweep.csv");
    write_csv(&csv, &cfg.fingerprint(), NOISE_HEADER, &rows)?;
    outcome.files.push(csv);
    Ok(outcome)
}

/// A bank of `n` cosine filters with β uniform in `beta_range` and γ
/// uniform in `[−π/2, π/2)`.
pub fn random_bank(
    n: usize,
    beta_range: [f64; 2],
    geometry: optics::KernelGeometry,
    rng: &mut impl Rng,
) -> Result<FilterBank> {
    let pixels = (0..n)
        .map(|_| {
            let beta = rng.random_range(beta_range[0]..=beta_range[1]);
            let gamma = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
            AspParams::cosine(beta, gamma)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let tile = TileConfig::new(pixels, 1, n, 10.0)?;
    Ok(optics::make_filter_bank(&tile, geometry)?)
}

pub const SWEEP_HEADER: &str = "trial,seed,betas,gammas,accuracy,error,error_std,status";

/// Frozen-bank LeNet accuracy across filter parameters. Random mode draws
/// a fresh bank per trial; grid mode trains one single-filter bank per
/// (β, γ) point with a common seed; default mode reuses the default bank.
/// The final row holds the mean and sample standard deviation of the error.
pub fn run_param_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let data = load_data(cfg)?;
    let input = input_shape(&data.train);
    let geometry = cfg.bank.geometry(LENET_KERNEL);
    let sw = &cfg.sweep;
    let mut banks: Vec<(u64, std::result::Result<FilterBank, String>)> = Vec::new();
    match sw.mode {
        SweepMode::Random => {
            for t in 0..sw.trials as u64 {
                let seed = trial_seed(cfg.seed, t);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(2);
                banks.push((
                    seed,
                    random_bank(sw.filters, sw.beta_range, geometry, &mut rng).map_err(|e| format!("{e:#}")),
                ));
            }
        }
        SweepMode::Grid => {
            let seed = trial_seed(cfg.seed, 0);
            for &beta in &sw.betas {
                for &gamma in &sw.gammas {
                    let bank = AspParams::canonical(0.0, beta, gamma, 1.0)
                        .and_then(|p| TileConfig::new(vec![p], 1, 1, 10.0))
                        .and_then(|t| optics::make_filter_bank(&t, geometry))
                        .map_err(|e| e.to_string());
                    banks.push((seed, bank));
                }
            }
        }
        SweepMode::Default => {
            let bank = experiment_bank(cfg, LENET_KERNEL)?;
            for t in 0..cfg.trials as u64 {
                banks.push((trial_seed(cfg.seed, t), Ok(bank.clone())));
            }
        }
    }

    let (train, test) = (data.train.to_samples(), data.test.to_samples());
    let mut outcome = RunOutcome::default();
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (trial, (seed, bank)) in banks.iter().enumerate() {
        let (betas, gammas) = match bank {
            Ok(b) => (
                b.tile.pixels.iter().map(|p| format!("{:.4}", p.beta)).collect::<Vec<_>>().join(";"),
                b.tile.pixels.iter().map(|p| format!("{:.4}", p.gamma)).collect::<Vec<_>>().join(";"),
            ),
            Err(_) => (String::new(), String::new()),
        };
        let result = bank.clone().map_err(|e| anyhow!(e)).and_then(|b| {
            let spec = pipeline_spec(cfg, Pipeline::Asp, &b, input, data.train.n_classes)?;
            train_once(&spec, &train, &test, cfg, *seed, false).map(|r| r.0)
        });
        match result {
            Ok(acc) => {
                eprintln!("param-sweep trial {trial}: accuracy {acc:.4}");
                errors.push(1.0 - acc);
                rows.push(format!("{trial},{seed},{betas},{gammas},{acc:.6},{:.6},,ok", 1.0 - acc));
            }
            Err(e) => {
                eprintln!("param-sweep trial {trial}: {e:#}");
                outcome.failures += 1;
                rows.push(format!("{trial},{seed},{betas},{gammas},,,,error: {}", csv_escape(&format!("{e:#}"))));
            }
        }
    }
    let (m, s) = mean_std(&errors);
    let (m, s) =
        if errors.is_empty() { (String::new(), String::new()) } else { (format!("{m:.6}"), format!("{s:.6}")) };
    rows.push(format!("summary,,,,,{m},{s},{} of {} trials ok", banks.len() - outcome.failures, banks.len()));
    let csv = out.join("param_sweep.csv");
    write_csv(&csv, &cfg.fingerprint(), SWEEP_HEADER, &rows)?;
    outcome.files.push(csv);
    Ok(outcome)
}

/// Resolves a built-in network name or a JSON spec path.
pub fn resolve_network(name: &str) -> Result<NetworkSpec> {
    if flops::ZOO.contains(&name) {
        return Ok(flops::zoo(name)?);
    }
    let text = fs::read_to_string(name).with_context(|| {
        format!("`{name}` is neither a built-in network ({}) nor a readable file", flops::ZOO.join(", "))
    })?;
    Ok(NetworkSpec::from_json(&text)?)
}

/// Applies an input-shape override, adapting a trainable first conv to the
/// new channel count and dense layers to the new flattened size.
pub fn with_input(spec: &NetworkSpec, input: Shape) -> Result<NetworkSpec> {
    let mut s = spec.clone();
    if let Some(LayerSpec::Conv(c)) = s.layers.first_mut() {
        if !c.is_frozen() {
            c.in_channels = input.c;
        }
    }
    Ok(s.with_input(input)?)
}

/// FLOPS tables for one network, a comma-separated list, or `all`.
pub fn run_flops(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out)?;
    let names: Vec<String> = if cfg.flops.network == "all" {
        flops::ZOO.iter().map(|s| s.to_string()).collect()
    } else {
        cfg.flops.network.split(',').map(|s| s.trim().to_string()).collect()
    };
    let (mut rows, mut text) = (Vec::new(), String::new());
    let mut summary = Vec::new();
    for name in &names {
        let mut spec = resolve_network(name)?;
        if let Some(input) = cfg.flops.input {
            spec = with_input(&spec, input)?;
        }
        let report = flops::network_flops(&spec)?;
        rows.extend(report.csv_rows());
        text.push_str(&report.to_table());
        text.push('\n');
        summary.push(format!(
            "{},{},{},{},{:.6}",
            report.network,
            report.input,
            report.first_layer_flops(),
            report.total,
            report.first_layer_fraction
        ));
    }
    let fp = cfg.fingerprint();
    let (csv, sum, txt) = (out.join("flops.csv"), out.join("flops_summary.csv"), out.join("flops.txt"));
    write_csv(&csv, &fp, flops::FlopsReport::CSV_HEADER, &rows)?;
    write_csv(&sum, &fp, "network,input,first_layer_flops,total_flops,first_layer_fraction", &summary)?;
    fs::write(&txt, text)?;
    Ok(RunOutcome { files: vec![csv, sum, txt], failures: 0 })
}

/// Per-image compression result.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthRow {
    pub source: String,
    pub report: BandwidthReport,
}

/// Captures `image` with `bank` (zero-pad, noiseless), quantizes, picks the
/// energy-retention threshold and run-length encodes. Decoding is checked
/// against the thresholded stack.
pub fn bandwidth_of(image: &Image, bank: &FilterBank, energy: f64, bits: u32) -> Result<BandwidthReport> {
    let stack = sensor::capture(image, bank, &CaptureSettings::default())?;
    let q = sensor::quantize_stack(&stack, bits);
    let tau = codec::energy_retention_threshold(&q, energy);
    let stream = codec::rle_encode_thresholded(&q, tau);
    if codec::rle_decode(&stream)? != codec::threshold_stack(&q, tau) {
        bail!("run-length round trip mismatch");
    }
    Ok(codec::bandwidth_report(&stream))
}

#[derive(Debug, Clone, Serialize)]
pub struct BandwidthSummary {
    pub images: usize,
    pub image_raw_bits: u64,
    pub stack_raw_bits: u64,
    pub encoded_bits: u64,
    /// Total stack bits over total encoded bits.
    pub ratio: f64,
    /// Total single-frame bits over total encoded bits.
    pub image_ratio: f64,
    pub mean_threshold: f64,
    pub reference_raw_bits: u64,
    pub reference_encoded_bits: u64,
    pub reference_ratio: f64,
    pub reference_note: &'static str,
}

pub fn summarize_bandwidth(rows: &[BandwidthRow]) -> BandwidthSummary {
    let sum = |f: fn(&BandwidthReport) -> u64| rows.iter().map(|r| f(&r.report)).sum::<u64>();
    let (image_raw_bits, stack_raw_bits, encoded_bits) =
        (sum(|r| r.image_raw_bits), sum(|r| r.stack_raw_bits), sum(|r| r.encoded_bits));
    let denom = encoded_bits.max(1) as f64;
    BandwidthSummary {
        images: rows.len(),
        image_raw_bits,
        stack_raw_bits,
        encoded_bits,
        ratio: stack_raw_bits as f64 / denom,
        image_ratio: image_raw_bits as f64 / denom,
        mean_threshold: rows.iter().map(|r| r.report.threshold as f64).sum::<f64>() / rows.len().max(1) as f64,
        reference_raw_bits: codec::REFERENCE_RAW_BITS,
        reference_encoded_bits: codec::REFERENCE_ENCODED_BITS,
        reference_ratio: codec::REFERENCE_RATIO,
        reference_note: "384x384 sensor: 1.2 Mbit raw vs about 120 Kbit of edge data; corpus dependent, not reproduced",
    }
}

/// Compression of edge captures of image files or test-set images.
pub fn run_bandwidth(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let bank = experiment_bank(cfg, SENSOR_KERNEL)?;
    let bw = &cfg.bandwidth;
    let images: Vec<(String, Image)> = if bw.image_files.is_empty() {
        let test = load_split(cfg, Split::Test)?;
        let name = match cfg.dataset {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        };
        test.images.into_iter().take(bw.images).enumerate().map(|(i, img)| (format!("{name}:{i}"), img)).collect()
    } else {
        bw.image_files.iter().map(|p| Ok((p.display().to_string(), imageio::load_gray(p)?))).collect::<Result<_>>()?
    };
    let mut outcome = RunOutcome::default();
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (source, img) in &images {
        match bandwidth_of(img, &bank, bw.energy, bw.bits) {
            Ok(report) => {
                lines.push(format!("{},{},ok", csv_escape(source), report.csv_row()));
                rows.push(BandwidthRow { source: source.clone(), report });
            }
            Err(e) => {
                outcome.failures += 1;
                lines.push(format!("{},,,,,,,,,,error: {}", csv_escape(source), csv_escape(&format!("{e:#}"))));
            }
        }
    }
    let summary = summarize_bandwidth(&rows);
    lines.push(format!(
        "total,,,,{},{},{},{:.6},{:.6},,{} images",
        summary.image_raw_bits,
        summary.stack_raw_bits,
        summary.encoded_bits,
        summary.ratio,
        summary.image_ratio,
        summary.images
    ));
    let fp = cfg.fingerprint();
    let csv = out.join("bandwidth.csv");
    write_csv(&csv, &fp, &format!("source,{},status", BandwidthReport::CSV_HEADER), &lines)?;
    let json = out.join("bandwidth.json");
    fs::write(&json, serde_json::to_string_pretty(&summary)? + "\n")?;
    outcome.files.extend([csv, json]);
    Ok(outcome)
}

/// Writes the default (or configured) bank as a binary file, its values
/// as CSV, and its frequency coverage.
pub fn gen_filters(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out)?;
    let bank = experiment_bank(cfg, SENSOR_KERNEL)?;
    let bin = out.join("filters.aspb");
    let f = fs::File::create(&bin).with_context(|| format!("creating {}", bin.display()))?;
    optics::write_filter_bank(&bank, std::io::BufWriter::new(f))?;
    let fp = cfg.fingerprint();
    let values = out.join("filters.csv");
    let text = optics::filter_bank_csv(&bank);
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().to_string();
    write_csv(&values, &fp, &header, &lines.map(str::to_string).collect::<Vec<_>>())?;
    let coverage = out.join("coverage.csv");
    let rows = optics::frequency_coverage(&bank)?
        .iter()
        .enumerate()
        .map(|(i, c)| {
            format!(
                "{i},{},{},{:.6},{:.6},{:.6},{}",
                c.peak_bin.0, c.peak_bin.1, c.radial_frequency, c.orientation, c.magnitude, c.degenerate
            )
        })
        .collect::<Vec<_>>();
    write_csv(&coverage, &fp, "kernel,peak_u,peak_v,radial_frequency,orientation,magnitude,degenerate", &rows)?;
    Ok(RunOutcome { files: vec![bin, values, coverage], failures: 0 })
}

/// Simulates one capture and writes the stack plus per-plane statistics.
pub fn run_capture(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out)?;
    let c = &cfg.capture;
    let image = match &c.image {
        Some(p) => imageio::load_gray(p)?,
        None => {
            let test = load_split(cfg, Split::Test)?;
            test.images
                .get(c.index)
                .cloned()
                .ok_or_else(|| anyhow!("test image {} out of range ({} images)", c.index, test.len()))?
        }
    };
    let bank = experiment_bank(cfg, SENSOR_KERNEL)?;
    let settings = CaptureSettings {
        snr_db: c.snr_db.and_then(Snr::as_option),
        seed: trial_seed(cfg.seed, 0),
        border: if c.valid { Border::Valid } else { Border::ZeroPad },
    };
    let stack = sensor::capture(&image, &bank, &settings)?;
    let path = out.join("capture.asps");
    let f = std::io::BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    let planes: Vec<Vec<f64>> = match c.quantize {
        Some(bits) => {
            let q = sensor::quantize_stack(&stack, bits);
            sensor::write_quantized_stack(&q, f)?;
            q.planes.iter().map(|p| p.iter().map(|&v| v as f64 * q.scale()).collect()).collect()
        }
        None => {
            sensor::write_feature_stack(&stack, f)?;
            stack.planes.clone()
        }
    };
    let rows: Vec<String> = planes
        .iter()
        .zip(&bank.tile.pixels)
        .enumerate()
        .map(|(i, (p, px))| {
            let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean_abs = p.iter().map(|v| v.abs()).sum::<f64>() / p.len().max(1) as f64;
            format!("{i},{:.6},{:.6},{min:.9},{max:.9},{mean_abs:.9}", px.beta, px.gamma)
        })
        .collect();
    let csv = out.join("capture.csv");
    write_csv(&csv, &cfg.fingerprint(), "plane,beta,gamma,min,max,mean_abs", &rows)?;
    Ok(RunOutcome { files: vec![path, csv], failures: 0 })
}
