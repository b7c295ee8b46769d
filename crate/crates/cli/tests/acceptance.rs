//! Acceptance suite: one test and one `criterion N: PASS|FAIL` line per
//! criterion. Dataset-backed criteria print SKIP when MNIST is absent.
//!
//! Set `ASP_ACCEPTANCE_QUICK=1` to skip the full 60k-sample training run.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use asp_vision::codec::{rle_decode, rle_encode};
use asp_vision::flops::{layer_flops, network_flops, zoo};
use asp_vision::nn::{
    build_lenet, check_layer, check_network, check_softmax_xent, ConvSpec, FirstLayer, Init, Layer, LayerSpec, Network,
    NetworkSpec, Shape, Tensor,
};
use asp_vision::optics::{default_tile, make_filter_bank, make_kernel, AspParams, KernelGeometry};
use asp_vision::sensor::{correlate2d, Border, QuantizedStack};
use asp_vision_cli::config::SweepMode;
use asp_vision_cli::experiments::{run_bandwidth, run_noise_sweep, run_param_sweep, run_train_eval};
use asp_vision_cli::ExperimentConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Kernel identities.
const QUADRATURE_TOL: f64 = 1e-12;
/// Rounding headroom for cos(φ + π) against −cos(φ), in units of f64
/// epsilon times the kernel amplitude 2m.
const NEGATION_ULPS: f64 = 16.0;
const PERIODICITY_TOL: f64 = 1e-12;
const DC_TOL: f64 = 1e-10;
// Convolution oracle.
const CONV_PAIRS: usize = 1000;
const CONV_TOL: f64 = 1e-12;
// Gradient checks.
const GRAD_EPS: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;
// MNIST accuracy.
const SUBSET: usize = 10_000;
const QUICK_EPOCHS: usize = 5;
const QUICK_BASELINE_MIN: f64 = 0.96;
const QUICK_ASP_MIN: f64 = 0.95;
const QUICK_BUDGET: Duration = Duration::from_secs(15 * 60);
const FULL_EPOCHS: usize = 10;
const FULL_BASELINE_MIN: f64 = 0.985;
const FULL_ASP_MIN: f64 = 0.980;
const FULL_GAP_MAX: f64 = 0.010;
// Noise sweep.
const NOISE_EPOCHS: usize = 5;
const HIGH_SNR_DB: f64 = 15.0;
const HIGH_SNR_DROP_MAX: f64 = 0.02;
// Parameter robustness.
const SWEEP_BANKS: usize = 20;
const SWEEP_FILTERS: usize = 6;
const SWEEP_EPOCHS: usize = 5;
const SWEEP_MEAN_ERR_MAX: f64 = 0.05;
const SWEEP_STD_MAX: f64 = 0.015;
const SWEEP_WORST_ERR_MAX: f64 = 0.08;
// FLOPS.
const GOOGLENET_FRACTION: [f64; 2] = [0.02, 0.03];
// Bandwidth.
const RLE_STACKS: usize = 10_000;
const ENERGY: f64 = 0.95;
const MIN_RATIO: f64 = 5.0;
const ZERO_PLANE_MAX_BITS: u64 = 40;

/// Writes straight to stdout so the verdict shows even when the harness
/// captures test output.
fn verdict(id: &str, pass: bool, detail: impl Display) {
    let state = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "\ncriterion {id}: {state}: {detail}").unwrap();
    out.flush().unwrap();
}

fn skip(id: &str, why: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "\ncriterion {id}: SKIP: {why}").unwrap();
}

fn mnist_root() -> Option<PathBuf> {
    let root = std::env::var_os("ASP_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    let dir = if root.join("mnist").is_dir() { root.join("mnist") } else { root.clone() };
    let has = |name: &str| dir.join(name).is_file() || dir.join(format!("{name}.gz")).is_file();
    (has("train-images-idx3-ubyte") && has("t10k-images-idx3-ubyte")).then_some(root)
}

fn mnist_config(root: PathBuf, train_limit: Option<usize>, epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { data_root: Some(root), train_limit, ..Default::default() };
    cfg.train.epochs = epochs;
    cfg
}

/// Data rows of a CSV written by the runner (fingerprint and header skipped).
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.lines().skip(2).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn num(cell: &str) -> f64 {
    cell.parse().unwrap_or(f64::NAN)
}

#[test]
fn criterion_1_kernel_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut quad, mut neg_ulps, mut period, mut dc) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let samples = 5000;
    for _ in 0..samples {
        // the kernel sizes and spans the experiments use
        let geo = if rng.random() { KernelGeometry::DEFAULT } else { KernelGeometry::with_size(5) };
        let alpha = rng.random_range(0.0..TAU);
        let beta = rng.random_range(0.5..60.0);
        let gamma = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
        let m = rng.random_range(0.05..=1.0);
        let kernel =
            |a: f64, g: f64, dc: bool| make_kernel(&AspParams { alpha: a, beta, gamma: g, m }, geo, dc).unwrap();

        let (c, s) = (kernel(alpha, gamma, false), kernel(alpha + FRAC_PI_2, gamma, false));
        for i in 0..geo.size {
            for j in 0..geo.size {
                let env = 2.0 * m * geo.envelope(geo.angle(j), geo.angle(i));
                quad = quad.max((c.at(i, j).powi(2) + s.at(i, j).powi(2) - env * env).abs());
            }
        }
        let flipped = kernel(alpha + PI, gamma, false);
        for (x, y) in c.values.iter().zip(&flipped.values) {
            neg_ulps = neg_ulps.max((x + y).abs() / (2.0 * m * f64::EPSILON));
        }
        // the orientation period is π only for the zero-phase kernel
        let (zero, turned) = (kernel(0.0, gamma, false), kernel(0.0, gamma + PI, false));
        for (x, y) in zero.values.iter().zip(&turned.values) {
            period = period.max((x - y).abs());
        }
        dc = dc.max(kernel(alpha, gamma, true).sum().abs());
    }
    let pass = quad <= QUADRATURE_TOL && neg_ulps <= NEGATION_ULPS && period <= PERIODICITY_TOL && dc <= DC_TOL;
    verdict(
        "1",
        pass,
        format!(
            "{samples} parameter draws: quadrature {quad:.2e} (<= {QUADRATURE_TOL:e}), alpha+pi negation {neg_ulps:.1} ulp of 2m \
             (<= {NEGATION_ULPS}), gamma+pi at alpha 0 {period:.2e} (<= {PERIODICITY_TOL:e}), DC sum {dc:.2e} (<= {DC_TOL:e})"
        ),
    );
    assert!(pass);
}

/// Triple-loop correlation, written independently of the library.
fn brute_correlate(img: &[f64], h: usize, w: usize, ker: &[f64], k: usize, pad: bool) -> Vec<f64> {
    let o = if pad { (k / 2) as i64 } else { 0 };
    let (oh, ow) = if pad { (h, w) } else { (h + 1 - k, w + 1 - k) };
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh as i64 {
        for c in 0..ow as i64 {
            let mut acc = 0.0;
            for i in 0..k as i64 {
                for j in 0..k as i64 {
                    let (y, x) = (r + i - o, c + j - o);
                    if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
                        acc += ker[i as usize * k + j as usize] * img[y as usize * w + x as usize];
                    }
                }
            }
            out.push(acc);
        }
    }
    out
}

#[test]
fn criterion_2_convolution_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for pair in 0..CONV_PAIRS {
        let k = 2 * rng.random_range(0..5) + 1;
        let h = rng.random_range(k..k + 30);
        let w = rng.random_range(k..k + 30);
        let img: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let ker: Vec<f64> = (0..k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (border, pad) = if pair % 2 == 0 { (Border::ZeroPad, true) } else { (Border::Valid, false) };
        let got = correlate2d(&img, h, w, &ker, k, border).unwrap();
        let want = brute_correlate(&img, h, w, &ker, k, pad);
        assert_eq!(got.values.len(), want.len());
        for (a, b) in got.values.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }

    let mut delta_exact = true;
    for k in [1, 3, 5, 7] {
        let mut delta = vec![0.0; k * k];
        delta[k * k / 2] = 1.0;
        let (h, w) = (19, 23);
        let img: Vec<f64> = (0..h * w).map(|_| rng.random_range(-5.0..5.0)).collect();
        delta_exact &= correlate2d(&img, h, w, &delta, k, Border::ZeroPad).unwrap().values == img;
        let valid = correlate2d(&img, h, w, &delta, k, Border::Valid).unwrap();
        let o = k / 2;
        let cropped: Vec<f64> = (o..h - o).flat_map(|r| img[r * w + o..r * w + w - o].iter().copied()).collect();
        delta_exact &= valid.values == cropped;
    }
    let pass = worst <= CONV_TOL && delta_exact;
    verdict(
        "2",
        pass,
        format!("{CONV_PAIRS} pairs, both borders: max deviation {worst:.2e} (<= {CONV_TOL:e}); delta kernel exact: {delta_exact}"),
    );
    assert!(pass);
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> LayerSpec {
    LayerSpec::Conv(ConvSpec { stride, pad, ..ConvSpec::trainable(cin, cout, k) })
}

#[test]
fn criterion_3_gradient_checks() {
    let mut results: Vec<(String, f64)> = Vec::new();
    let cases: Vec<(&str, LayerSpec, Vec<usize>)> = vec![
        ("conv", conv(2, 3, 3, 1, 0), vec![2, 2, 6, 6]),
        ("conv-pad", conv(2, 3, 5, 1, 2), vec![2, 2, 6, 6]),
        ("conv-stride", conv(3, 2, 3, 2, 1), vec![2, 3, 7, 7]),
        ("maxpool", LayerSpec::MaxPool { window: 2, stride: 2, pad: 0 }, vec![2, 3, 6, 6]),
        ("relu", LayerSpec::Relu, vec![3, 40]),
        ("fc", LayerSpec::Dense { inputs: 12, outputs: 5 }, vec![3, 12]),
    ];
    for (name, spec, shape) in cases {
        let input = if shape.len() == 4 { Shape::new(shape[1], shape[2], shape[3]) } else { Shape::flat(shape[1]) };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let layer = Layer::from_spec(&spec, input, Init::Gaussian { std: 0.5 }, &mut rng).unwrap();
        let r = check_layer(&layer, &random_tensor(&shape, 32), GRAD_EPS, 33).unwrap();
        results.push((name.into(), r.max_rel_error));
    }
    let r = check_softmax_xent(&random_tensor(&[4, 6], 34), &[0, 5, 2, 2], GRAD_EPS).unwrap();
    results.push(("softmax-xent".into(), r.max_rel_error));

    // the full five-layer body on a small input, trainable and frozen-bank
    let input = Shape::new(1, 16, 16);
    let bank = make_filter_bank(&default_tile(), KernelGeometry::with_size(5)).unwrap();
    let nets: [(&str, NetworkSpec); 2] = [
        ("lenet", build_lenet(FirstLayer::Trainable(12), input, 4).unwrap()),
        ("lenet-frozen", build_lenet(FirstLayer::Frozen(&bank), input, 4).unwrap()),
    ];
    let mut frozen_ok = true;
    for (name, spec) in nets {
        // fan-in scaling keeps activations near unit size behind the unnormalized bank,
        // where a wide init would let the O(ε²) difference error dominate
        let net = Network::new(&spec, Init::default(), 35).unwrap();
        let r = check_network(&net, &random_tensor(&[2, 1, 16, 16], 36), &[1, 3], GRAD_EPS).unwrap();
        if let Some(g) = r.frozen_grad_max_abs {
            frozen_ok &= g == 0.0;
        }
        results.push((name.into(), r.max_rel_error));
    }
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let pass = worst <= GRAD_TOL && frozen_ok;
    let listing: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(
        "3",
        pass,
        format!(
            "max rel error {worst:.2e} (<= {GRAD_TOL:e}) over [{}]; frozen bank gradient zero: {frozen_ok}",
            listing.join(", ")
        ),
    );
    assert!(pass);
}

/// Mean baseline and ASP accuracies from the summary row.
fn train_eval_accuracy(cfg: &ExperimentConfig) -> (f64, f64, String) {
    let dir = tempfile::tempdir().unwrap();
    run_train_eval(cfg, dir.path()).unwrap();
    let table = rows(&dir.path().join("train_eval.csv"));
    let summary = table.last().unwrap();
    (num(&summary[2]), num(&summary[4]), summary[6].clone())
}

#[test]
fn criterion_4_mnist_accuracy_quick() {
    let Some(root) = mnist_root() else { return skip("4 (quick)", "MNIST not found") };
    let start = Instant::now();
    let (base, asp, status) = train_eval_accuracy(&mnist_config(root, Some(SUBSET), QUICK_EPOCHS));
    let elapsed = start.elapsed();
    let pass = base >= QUICK_BASELINE_MIN && asp >= QUICK_ASP_MIN && elapsed <= QUICK_BUDGET;
    verdict(
        "4 (quick)",
        pass,
        format!(
            "{SUBSET} samples x {QUICK_EPOCHS} epochs: baseline {:.2}% (>= {:.0}%), ASP {:.2}% (>= {:.0}%), {:.0} s (<= {} s), {status}",
            100.0 * base,
            100.0 * QUICK_BASELINE_MIN,
            100.0 * asp,
            100.0 * QUICK_ASP_MIN,
            elapsed.as_secs_f64(),
            QUICK_BUDGET.as_secs()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_mnist_accuracy_full() {
    if std::env::var_os("ASP_ACCEPTANCE_QUICK").is_some_and(|v| v == "1") {
        return skip("4 (full)", "ASP_ACCEPTANCE_QUICK=1");
    }
    let Some(root) = mnist_root() else { return skip("4 (full)", "MNIST not found") };
    let (base, asp, status) = train_eval_accuracy(&mnist_config(root, None, FULL_EPOCHS));
    let gap = base - asp;
    let pass = base >= FULL_BASELINE_MIN && asp >= FULL_ASP_MIN && gap <= FULL_GAP_MAX;
    verdict(
        "4 (full)",
        pass,
        format!(
            "60000 samples x {FULL_EPOCHS} epochs: baseline {:.2}% (>= {:.1}%), ASP {:.2}% (>= {:.1}%), gap {:.2} points (<= {:.1}); \
             reference 99.14% / 99.04%; {status}",
            100.0 * base,
            100.0 * FULL_BASELINE_MIN,
            100.0 * asp,
            100.0 * FULL_ASP_MIN,
            100.0 * gap,
            100.0 * FULL_GAP_MAX
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_noise_sweep() {
    let Some(root) = mnist_root() else { return skip("5", "MNIST not found") };
    let cfg = mnist_config(root, Some(SUBSET), NOISE_EPOCHS);
    let dir = tempfile::tempdir().unwrap();
    run_noise_sweep(&cfg, dir.path()).unwrap();
    let table = rows(&dir.path().join("noise_sweep.csv"));
    let acc = |snr: f64, col: usize| {
        let row = table.iter().find(|r| num(&r[0]) == snr);
        row.map_or(f64::NAN, |r| num(&r[col]))
    };
    let mut pass = true;
    let mut notes = Vec::new();
    for (col, name) in [(1, "baseline"), (2, "asp")] {
        let clean = acc(f64::INFINITY, col);
        let worst_drop = cfg
            .noise
            .snr_db
            .iter()
            .filter_map(|s| s.as_option())
            .filter(|&db| db >= HIGH_SNR_DB)
            .map(|db| clean - acc(db, col))
            .fold(f64::NEG_INFINITY, f64::max);
        let (at9, at12, at28) = (acc(9.0, col), acc(12.0, col), acc(28.0, col));
        pass &= worst_drop <= HIGH_SNR_DROP_MAX && at9 < at28;
        notes.push(format!(
            "{name}: clean {:.2}%, worst drop at >= {HIGH_SNR_DB} dB {:.2} points (<= {:.0}), 9 dB {:.2}% < 28 dB {:.2}%, 12 dB {:.2}%",
            100.0 * clean,
            100.0 * worst_drop,
            100.0 * HIGH_SNR_DROP_MAX,
            100.0 * at9,
            100.0 * at28,
            100.0 * at12
        ));
    }
    verdict(
        "5",
        pass,
        format!(
            "{SUBSET} samples x {NOISE_EPOCHS} epochs, matched SNR; {}; reference targets (not gated) ASP 38.6% / 77.9%, \
             baseline 42.6% / 83.6% at 9 / 12 dB",
            notes.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_parameter_robustness() {
    let Some(root) = mnist_root() else { return skip("6", "MNIST not found") };
    let mut cfg = mnist_config(root, Some(SUBSET), SWEEP_EPOCHS);
    cfg.sweep.mode = SweepMode::Random;
    cfg.sweep.trials = SWEEP_BANKS;
    cfg.sweep.filters = SWEEP_FILTERS;
    let dir = tempfile::tempdir().unwrap();
    run_param_sweep(&cfg, dir.path()).unwrap();
    let table = rows(&dir.path().join("param_sweep.csv"));
    let (summary, trials) = table.split_last().unwrap();
    let errors: Vec<f64> = trials.iter().map(|r| num(&r[5])).collect();
    let (mean, std) = (num(&summary[5]), num(&summary[6]));
    let worst = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let all_ok = errors.len() == SWEEP_BANKS && errors.iter().all(|e| e.is_finite());
    let pass = all_ok && mean <= SWEEP_MEAN_ERR_MAX && std <= SWEEP_STD_MAX && worst <= SWEEP_WORST_ERR_MAX;
    verdict(
        "6",
        pass,
        format!(
            "{SWEEP_BANKS} random {SWEEP_FILTERS}-filter banks, {SUBSET} samples x {SWEEP_EPOCHS} epochs: mean error {:.2}% (<= {:.0}%), \
             std {:.2}% (<= {:.1}%), worst {:.2}% (<= {:.0}%), {}",
            100.0 * mean,
            100.0 * SWEEP_MEAN_ERR_MAX,
            100.0 * std,
            100.0 * SWEEP_STD_MAX,
            100.0 * worst,
            100.0 * SWEEP_WORST_ERR_MAX,
            summary[7]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_flops() {
    let lenet = |side| build_lenet(FirstLayer::Trainable(12), Shape::new(1, side, side), 10).unwrap();
    let report = network_flops(&lenet(28)).unwrap();
    // conv 2·K²·Cin·Cout·Hout·Wout, fc 2·in·out, pool and relu one per output, softmax five per class
    let oracle: [(&str, u64); 8] = [
        ("conv1", 2 * 5 * 5 * 12 * 24 * 24),
        ("maxpool2", 12 * 12 * 12),
        ("conv3", 2 * 5 * 5 * 12 * 50 * 8 * 8),
        ("maxpool4", 50 * 4 * 4),
        ("fc5", 2 * 800 * 500),
        ("relu6", 500),
        ("fc7", 2 * 500 * 10),
        ("softmax-xent8", 5 * 10),
    ];
    let got: Vec<(&str, u64)> = report.layers.iter().map(|l| (l.name.as_str(), l.flops)).collect();
    let lenet_ok = got == oracle && report.total == oracle.iter().map(|o| o.1).sum::<u64>();

    let google = network_flops(&zoo("googlenet").unwrap()).unwrap().first_layer_fraction;
    let google_ok = (GOOGLENET_FRACTION[0]..=GOOGLENET_FRACTION[1]).contains(&google);

    // same-padded layers keep H×W tied to the input, so doubling the side is 4× exactly
    let same = LayerSpec::Conv(ConvSpec { pad: 2, ..ConvSpec::trainable(1, 12, 5) });
    let pool = LayerSpec::MaxPool { window: 2, stride: 2, pad: 0 };
    let mut growth_ok = true;
    for side in [28, 32, 64] {
        for spec in [&same, &pool] {
            growth_ok &= layer_flops(spec, Shape::new(1, 2 * side, 2 * side)).unwrap()
                == 4 * layer_flops(spec, Shape::new(1, side, side)).unwrap();
        }
    }
    // the valid LeNet conv follows the formula: output side 24 -> 52
    let doubled = network_flops(&lenet(56)).unwrap().first_layer_flops();
    growth_ok &= doubled == 2 * 5 * 5 * 12 * 52 * 52;
    let growth = doubled as f64 / report.first_layer_flops() as f64;

    let pass = lenet_ok && google_ok && growth_ok;
    verdict(
        "7",
        pass,
        format!(
            "LeNet(12) per-layer oracle match: {lenet_ok} (total {}); GoogLeNet first-layer share {:.2}% in [{:.0}%, {:.0}%]; \
             side x2 exact per formula: {growth_ok} (LeNet conv1 x{growth:.3}, same-padded x4)",
            report.total,
            100.0 * google,
            100.0 * GOOGLENET_FRACTION[0],
            100.0 * GOOGLENET_FRACTION[1]
        ),
    );
    assert!(pass);
}

fn random_stack(rng: &mut ChaCha8Rng) -> QuantizedStack {
    let (h, w, d) = (rng.random_range(1..24), rng.random_range(1..24), rng.random_range(1..6));
    let sparsity: f64 = rng.random();
    let planes = (0..d)
        .map(|_| (0..h * w).map(|_| if rng.random::<f64>() < sparsity { 0 } else { rng.random::<i8>() }).collect())
        .collect();
    QuantizedStack::new(h, w, planes, rng.random_range(1e-3..1.0))
}

#[test]
fn criterion_8_bandwidth() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let lossless = (0..RLE_STACKS).all(|_| {
        let q = random_stack(&mut rng);
        rle_decode(&rle_encode(&q)).is_ok_and(|back| back == q)
    });
    let zero_bits = rle_encode(&QuantizedStack::new(64, 64, vec![vec![0; 64 * 64]], 1.0)).bit_count;
    let zero_ok = zero_bits < ZERO_PLANE_MAX_BITS;

    let (ratio_ok, ratio_note) = match mnist_root() {
        Some(root) => {
            let mut cfg = mnist_config(root, None, 1);
            cfg.bandwidth.images = 10_000;
            cfg.bandwidth.energy = ENERGY;
            let dir = tempfile::tempdir().unwrap();
            run_bandwidth(&cfg, dir.path()).unwrap();
            let summary: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(dir.path().join("bandwidth.json")).unwrap()).unwrap();
            let ratio = summary["ratio"].as_f64().unwrap();
            (
                ratio >= MIN_RATIO,
                format!(
                    "MNIST {} test captures at {:.0}% energy: ratio {ratio:.2}:1 (>= {MIN_RATIO}:1), mean threshold {:.1}",
                    summary["images"],
                    100.0 * ENERGY,
                    summary["mean_threshold"].as_f64().unwrap()
                ),
            )
        }
        None => (false, "MNIST not found, ratio unmeasured".into()),
    };
    let pass = lossless && zero_ok && ratio_ok;
    verdict(
        "8",
        pass,
        format!(
            "RLE lossless on {RLE_STACKS} random stacks: {lossless}; all-zero plane {zero_bits} bits (< {ZERO_PLANE_MAX_BITS}); \
             {ratio_note}; CIFAR-10 not available; reference 10:1 annotation not gated"
        ),
    );
    assert!(pass);
}

fn run_cli(out: &Path, root: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_asp-vision"))
        .arg("--out")
        .arg(out)
        .arg("--data-root")
        .arg(root)
        .args(["--seed", "4242", "--train-limit", "600", "--test-limit", "200", "--epochs", "1"])
        .args(args)
        .env_remove("ASP_DATA_ROOT")
        .status()
        .unwrap();
    assert!(status.success(), "{args:?}");
}

fn file_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_9_determinism() {
    let Some(root) = mnist_root() else { return skip("9", "MNIST not found") };
    let commands: [&[&str]; 7] = [
        &["gen-filters"],
        &["capture", "--index", "7", "--snr", "12", "--quantize", "8"],
        &["train-eval", "--trials", "2"],
        &["noise-sweep", "--snr", "9,15,inf"],
        &["param-sweep", "--trials", "2"],
        &["flops", "--network", "all"],
        &["bandwidth", "--images", "50"],
    ];
    let tmp = tempfile::tempdir().unwrap();
    let mut compared = 0;
    let mut differing = Vec::new();
    for args in commands {
        let a = tmp.path().join(format!("{}_a", args[0]));
        let b = tmp.path().join(format!("{}_b", args[0]));
        run_cli(&a, &root, args);
        run_cli(&b, &root, args);
        let (fa, fb) = (file_bytes(&a), file_bytes(&b));
        assert_eq!(fa.iter().map(|f| &f.0).collect::<Vec<_>>(), fb.iter().map(|f| &f.0).collect::<Vec<_>>());
        for ((name, x), (_, y)) in fa.iter().zip(&fb) {
            compared += 1;
            if x != y {
                differing.push(format!("{}/{name}", args[0]));
            }
        }
    }
    let pass = differing.is_empty();
    verdict(
        "9",
        pass,
        format!(
            "{} subcommands rerun with one master seed: {compared} output files compared, differing [{}]",
            commands.len(),
            differing.join(", ")
        ),
    );
    assert!(pass);
}
