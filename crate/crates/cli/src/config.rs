//! Experiment configuration: a JSON document whose fields all have
//! defaults, overridable from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use asp_vision::nn::{Shape, TrainConfig};
use asp_vision::optics::KernelGeometry;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "ASP_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    /// LeNet with a trainable first layer.
    Baseline,
    /// LeNet whose first layer is the frozen optical bank.
    Asp,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Baseline => "baseline",
            Pipeline::Asp => "asp",
        }
    }
}

/// Signal-to-noise ratio in dB; `+inf` means no noise. Serialized as a
/// number, or the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snr(pub f64);

impl Snr {
    pub fn as_option(self) -> Option<f64> {
        (self.0 != f64::INFINITY).then_some(self.0)
    }
}

impl std::fmt::Display for Snr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0 == f64::INFINITY {
            write!(f, "inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl std::str::FromStr for Snr {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "inf" | "+inf" | "Inf" | "INF" => Ok(Snr(f64::INFINITY)),
            t => match t.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Snr(v)),
                _ => Err(format!("invalid SNR `{s}`: expected dB value or `inf`")),
            },
        }
    }
}

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str("inf")
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Snr(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    /// A bank written by `gen-filters`; overrides the default tile.
    pub file: Option<PathBuf>,
    /// Kernel side length. Defaults to 5 for LeNet experiments and 7
    /// elsewhere.
    pub kernel_size: Option<usize>,
    /// Angular extent in radians; defaults to 0.1 rad per pixel.
    pub extent: Option<f64>,
    /// Envelope sigma in radians; defaults to a quarter of the extent.
    pub sigma: Option<f64>,
}

impl BankConfig {
    pub fn geometry(&self, default_size: usize) -> KernelGeometry {
        let mut g = KernelGeometry::with_size(self.kernel_size.unwrap_or(default_size));
        if let Some(e) = self.extent {
            g.extent = e;
            g.sigma = e / 4.0;
        }
        if let Some(s) = self.sigma {
            g.sigma = s;
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub snr_db: Vec<Snr>,
    /// Train once on clean data and evaluate on noisy test data, instead of
    /// training and testing at matched SNR.
    pub clean_train: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { snr_db: [9.0, 12.0, 15.0, 20.0, 28.0, f64::INFINITY].into_iter().map(Snr).collect(), clean_train: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// Random multi-filter banks.
    Random,
    /// One single-filter bank per (β, γ) grid point.
    Grid,
    /// The default bank, once per trial.
    Default,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub mode: SweepMode,
    /// Number of random banks.
    pub trials: usize,
    /// Filters per random bank.
    pub filters: usize,
    pub beta_range: [f64; 2],
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        use std::f64::consts::FRAC_PI_4;
        Self {
            mode: SweepMode::Random,
            trials: 20,
            filters: 6,
            beta_range: [5.0, 50.0],
            betas: vec![5.0, 20.0, 35.0, 50.0],
            gammas: vec![-2.0 * FRAC_PI_4, -FRAC_PI_4, 0.0, FRAC_PI_4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsConfig {
    /// Built-in network name or a path to a network JSON file.
    pub network: String,
    /// Replaces the network's input shape.
    pub input: Option<Shape>,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        Self { network: "lenet".into(), input: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandwidthConfig {
    /// Test-set images to capture when no image files are given.
    pub images: usize,
    /// Grayscale PNG/PGM files to capture instead of dataset images.
    pub image_files: Vec<PathBuf>,
    /// Fraction of code energy the threshold must retain.
    pub energy: f64,
    pub bits: u32,
}

impl Default for BandwidthConfig {
    fn default() -> Self {
        Self { images: 100, image_files: Vec::new(), energy: 0.95, bits: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptureConfig {
    /// Scene file; when absent, `index` selects a test-set image.
    pub image: Option<PathBuf>,
    pub index: usize,
    pub snr_db: Option<Snr>,
    /// ADC bits; `None` keeps real-valued planes.
    pub quantize: Option<u32>,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every trial seed derives from it.
    pub seed: u64,
    pub dataset: DatasetKind,
    /// Dataset root; falls back to `$ASP_DATA_ROOT`, then `./data`.
    pub data_root: Option<PathBuf>,
    /// Use only the first `n` training images.
    pub train_limit: Option<usize>,
    /// Use only the first `n` test images.
    pub test_limit: Option<usize>,
    pub train: TrainConfig,
    pub pipelines: Vec<Pipeline>,
    /// First-layer filters of the baseline LeNet.
    pub baseline_filters: usize,
    pub bank: BankConfig,
    pub trials: usize,
    /// When set, each trial splits the training set at random into this
    /// training fraction and a validation remainder, and reports
    /// validation accuracy.
    pub split: Option<f64>,
    pub noise: NoiseConfig,
    pub sweep: SweepConfig,
    pub flops: FlopsConfig,
    pub bandwidth: BandwidthConfig,
    pub capture: CaptureConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetKind::Mnist,
            data_root: None,
            train_limit: None,
            test_limit: None,
            train: TrainConfig::default(),
            pipelines: vec![Pipeline::Baseline, Pipeline::Asp],
            baseline_filters: 12,
            bank: BankConfig::default(),
            trials: 1,
            split: None,
            noise: NoiseConfig::default(),
            sweep: SweepConfig::default(),
            flops: FlopsConfig::default(),
            bandwidth: BandwidthConfig::default(),
            capture: CaptureConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("parsing experiment config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    /// Directory holding the dataset files: `<root>/mnist` or
    /// `<root>/cifar-10-batches-bin`, or the root itself when the
    /// subdirectory is missing.
    pub fn dataset_dir(&self) -> PathBuf {
        let root = self.data_root();
        let sub = match self.dataset {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar-10-batches-bin",
        };
        let dir = root.join(sub);
        if dir.is_dir() {
            dir
        } else {
            root
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.pipelines.is_empty() {
            bail!("no pipelines selected");
        }
        if self.trials == 0 {
            bail!("trials must be at least 1");
        }
        if self.baseline_filters == 0 {
            bail!("baseline_filters must be at least 1");
        }
        if let Some(f) = self.split {
            if !(f > 0.0 && f < 1.0) {
                bail!("split fraction {f} outside (0, 1)");
            }
        }
        if self.noise.snr_db.is_empty() {
            bail!("noise.snr_db grid is empty");
        }
        if let Some(s) = self.noise.snr_db.iter().find(|s| s.0.is_nan() || s.0 == f64::NEG_INFINITY) {
            bail!("invalid SNR {s}");
        }
        let sw = &self.sweep;
        match sw.mode {
            SweepMode::Random if sw.trials == 0 || sw.filters == 0 => {
                bail!("random sweep needs trials and filters ≥ 1")
            }
            SweepMode::Grid if sw.betas.is_empty() || sw.gammas.is_empty() => bail!("sweep grid is empty"),
            _ => {}
        }
        if !(sw.beta_range[0] > 0.0 && sw.beta_range[0] <= sw.beta_range[1]) {
            bail!("invalid beta range {:?}", sw.beta_range);
        }
        if !(self.bandwidth.energy > 0.0 && self.bandwidth.energy <= 1.0) {
            bail!("bandwidth energy fraction {} outside (0, 1]", self.bandwidth.energy);
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, written at the top of every CSV.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
